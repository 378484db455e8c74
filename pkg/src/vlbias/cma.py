"""Causal mediation analysis of the bias score via head-level activation patching.

For an input intervention ``i`` and a set of heads ``M``:

* ``y_O``: bias on unmodified inputs;
* ``y_E``: bias on ``i``-intervened inputs;
* ``y_D``: ``i``-intervened inputs, heads in ``M`` patched with their values on
  unmodified inputs (direct effect);
* ``y_I``: unmodified inputs, heads in ``M`` patched with their values on
  ``i``-intervened inputs (indirect effect);

and ``E = y_E - y_O``, ``DE = y_D - y_O``, ``IE = y_I - y_O``.
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from .evaluate import dataset_scores, truth_matrix
from .metrics import BiasScore, FprTable, bias_vl, fpr_table
from .model import (
    FUSION_IMAGE,
    FUSION_TEXT,
    IMAGE_ENC,
    MAN,
    MODULES,
    PERSON,
    TEXT_ENC,
    WOMAN,
    HeadAddress,
    ModelConfig,
    SceneInput,
    TextInput,
    ToyVLM,
    config_to_dict,
)
from .scenes import FEMALE, MALE, LabeledSample, person_appearance
from .tensor import HeadHook, HookMode


class Intervention(str, enum.Enum):
    NULL = "null"
    REPLACE_GENDER = "replace-gender"
    MASK_GENDER = "mask-gender"
    BOTH = "both"

    @property
    def touches_text(self) -> bool:
        return self in (Intervention.REPLACE_GENDER, Intervention.BOTH)

    @property
    def touches_image(self) -> bool:
        return self in (Intervention.MASK_GENDER, Intervention.BOTH)


# Intervention used when sweeping each module, following the modality whose
# sign the module's heads read (fusion parts: the modality of the queries).
MODULE_INTERVENTION = {
    IMAGE_ENC: Intervention.MASK_GENDER,
    FUSION_IMAGE: Intervention.MASK_GENDER,
    TEXT_ENC: Intervention.REPLACE_GENDER,
    FUSION_TEXT: Intervention.REPLACE_GENDER,
}


class MediatorSet(frozenset):
    """A set of :class:`HeadAddress`."""

    @classmethod
    def layers_up_to(cls, config: ModelConfig, module: str, k: int) -> "MediatorSet":
        """All heads of layers ``0..k`` (inclusive) of ``module``."""
        if not 0 <= k < config.layers(module):
            raise ValueError(f"{module} has {config.layers(module)} layers; cannot take prefix up to {k}")
        return cls(HeadAddress(module, l, h) for l in range(k + 1) for h in range(config.n_heads))

    @classmethod
    def all_heads(cls, config: ModelConfig, module: Optional[str] = None) -> "MediatorSet":
        return cls(config.all_heads(module))

    def validate(self, config: ModelConfig) -> None:
        for a in self:
            config.check_address(a)

    def __repr__(self) -> str:
        return f"MediatorSet({sorted(self)!r})"


# --------------------------------------------------------------- interventions


def _replace_gender(text: TextInput) -> TextInput:
    return TextInput(tuple(PERSON if t in (MAN, WOMAN) else t for t in text.tokens))


def _mask_gender(scene: SceneInput, mask_vector: Optional[np.ndarray]) -> SceneInput:
    p = scene.person_cell
    if p is None:
        return scene
    if mask_vector is None:
        mask_vector = person_appearance(scene.appearance.shape[1] - 1)
    app = scene.appearance.copy()
    app[p] = mask_vector
    gc = scene.gender_channel.copy()
    gc[p] = 0.0
    return SceneInput(scene.cells, gc, app)


def apply_intervention(
    sample: LabeledSample, intervention: Intervention, mask_vector: Optional[np.ndarray] = None
) -> LabeledSample:
    """Counterfactual copy of ``sample``; ground truth and gender label are kept.

    Replace-gender swaps ``man``/``woman`` for ``person`` word by word;
    mask-gender zeroes the person cell's gender channel and sets its
    appearance to ``mask_vector`` (the neutral person appearance by default).
    Both operations preserve token count and scene shape.
    """
    intervention = Intervention(intervention)
    if intervention is Intervention.NULL:
        return sample
    text, scene = sample.text, sample.scene
    if intervention.touches_text:
        text = _replace_gender(text)
    if intervention.touches_image:
        scene = _mask_gender(scene, mask_vector)
    return replace(sample, text=text, scene=scene)


# ------------------------------------------------------------------ measuring


def gendered(samples: Sequence[LabeledSample]) -> list[LabeledSample]:
    return [s for s in samples if s.gender in (MALE, FEMALE)]


def patched_chunk(
    model: ToyVLM,
    input_state: Intervention,
    mediator: Iterable[HeadAddress],
    mediator_state: Intervention,
):
    """Chunk runner for two-pass capture/patch evaluation."""
    mediator = sorted(set(mediator))

    def run(chunk):
        live = model.stack(*_unzip(chunk, input_state))
        if not mediator:
            det = model.run_batch(live).detection
            return det.image_scores, det.categories
        source = model.stack(*_unzip(chunk, mediator_state))
        rec = model.run_batch(source, {a: HeadHook(HookMode.RECORD) for a in mediator}).recorded
        if set(rec) != set(mediator):
            raise RuntimeError("patching pass failed to record every mediator head")
        det = model.run_batch(live, {a: HeadHook(HookMode.SUBSTITUTE, rec[a]) for a in mediator}).detection
        return det.image_scores, det.categories

    return run


def _unzip(chunk, intervention):
    moved = [apply_intervention(s, intervention) for s in chunk]
    return [s.scene for s in moved], [s.text for s in moved]


def measure_table(
    model: ToyVLM,
    samples: Sequence[LabeledSample],
    input_state: Intervention = Intervention.NULL,
    mediator: Iterable[HeadAddress] = (),
    mediator_state: Intervention = Intervention.NULL,
    threads: int = 1,
) -> FprTable:
    mediator = MediatorSet(mediator)
    mediator.validate(model.config)
    data = gendered(samples)
    cats = model.config.categories
    scores = dataset_scores(model, data, patched_chunk(model, input_state, mediator, mediator_state), threads)
    return fpr_table(scores, truth_matrix(data, cats), [s.gender for s in data], cats, model.config.tau)


def measure_y(
    model: ToyVLM,
    samples: Sequence[LabeledSample],
    input_state: Intervention = Intervention.NULL,
    mediator: Iterable[HeadAddress] = (),
    mediator_state: Intervention = Intervention.NULL,
    threads: int = 1,
) -> BiasScore:
    """Bias score with inputs in ``input_state`` and ``mediator`` heads held at their ``mediator_state`` values."""
    return bias_vl(measure_table(model, samples, input_state, mediator, mediator_state, threads))


def clamp_oracle(
    model: ToyVLM,
    samples: Sequence[LabeledSample],
    intervention: Intervention,
    mediator: Iterable[HeadAddress],
    threads: int = 1,
) -> BiasScore:
    """Ground-truth ``y_I``: no patching, just disable the injections inside ``mediator``
    that read a modality ``intervention`` removes, and evaluate unmodified inputs.
    """
    intervention = Intervention(intervention)
    clamped = model.clamped(mediator, image=intervention.touches_image, text=intervention.touches_text)
    return measure_y(clamped, samples, threads=threads)


@dataclass(frozen=True)
class EffectReport:
    intervention: Intervention
    y_O: BiasScore
    y_E: BiasScore
    y_D: BiasScore
    y_I: BiasScore
    fingerprint: str
    module: Optional[str] = None
    depth: Optional[int] = None
    n_heads: int = 0

    @property
    def E(self) -> float:
        return self.y_E.value - self.y_O.value

    @property
    def DE(self) -> float:
        return self.y_D.value - self.y_O.value

    @property
    def IE(self) -> float:
        return self.y_I.value - self.y_O.value

    def _pct(self, x: float) -> Optional[float]:
        """Bias reduction relative to ``y_O`` in percent (None when ``y_O`` is 0)."""
        if self.y_O.value == 0:
            return None
        return -x / self.y_O.value * 100.0 + 0.0  # + 0.0 folds -0.0 into 0.0

    @property
    def pct_E(self) -> Optional[float]:
        return self._pct(self.E)

    @property
    def pct_DE(self) -> Optional[float]:
        return self._pct(self.DE)

    @property
    def pct_IE(self) -> Optional[float]:
        return self._pct(self.IE)


def fingerprint(model: ToyVLM, intervention: Intervention, mediator: Iterable[HeadAddress]) -> str:
    payload = {
        "model": config_to_dict(model.config, model.injections),
        "intervention": Intervention(intervention).value,
        "mediator": [str(a) for a in sorted(mediator)],
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def effects(
    model: ToyVLM,
    samples: Sequence[LabeledSample],
    intervention: Intervention,
    mediator: Iterable[HeadAddress] = (),
    threads: int = 1,
    *,
    baseline: Optional[tuple[BiasScore, BiasScore]] = None,
    module: Optional[str] = None,
    depth: Optional[int] = None,
) -> EffectReport:
    """Total, direct and indirect effects of ``intervention`` through ``mediator``.

    ``baseline`` may carry precomputed ``(y_O, y_E)`` for this intervention.
    """
    intervention = Intervention(intervention)
    mediator = MediatorSet(mediator)
    null = Intervention.NULL
    if baseline is None:
        y_O = measure_y(model, samples, null, (), null, threads)
        y_E = measure_y(model, samples, intervention, (), null, threads)
    else:
        y_O, y_E = baseline
    if mediator:
        y_D = measure_y(model, samples, intervention, mediator, null, threads)
        y_I = measure_y(model, samples, null, mediator, intervention, threads)
    else:
        y_D, y_I = y_E, y_O
    return EffectReport(
        intervention, y_O, y_E, y_D, y_I,
        fingerprint(model, intervention, mediator),
        module, depth, len(mediator),
    )


def layer_sweep(
    model: ToyVLM,
    samples: Sequence[LabeledSample],
    module: str,
    intervention: Optional[Intervention] = None,
    depths: Optional[Sequence[int]] = None,
    threads: int = 1,
) -> list[EffectReport]:
    """One :func:`effects` call per depth ``k`` with mediator = layers ``0..k`` of ``module``."""
    if module not in MODULES:
        raise ValueError(f"unknown module {module!r}")
    intervention = Intervention(intervention or MODULE_INTERVENTION[module])
    L = model.config.layers(module)
    depths = list(range(L)) if depths is None else list(depths)
    for k in depths:
        if not 0 <= k < L:
            raise ValueError(f"depth {k} outside {module} ({L} layers)")
    null = Intervention.NULL
    base = (measure_y(model, samples, null, threads=threads), measure_y(model, samples, intervention, threads=threads))
    return [
        effects(model, samples, intervention, MediatorSet.layers_up_to(model.config, module, k), threads,
                baseline=base, module=module, depth=k)
        for k in depths
    ]


def combined_sweep(
    model: ToyVLM,
    samples: Sequence[LabeledSample],
    fraction: float = 1.0,
    threads: int = 1,
) -> dict[str, EffectReport]:
    """Vision, language and joint interventions over the same fraction of encoder depth.

    ``fraction`` selects the first ``ceil(fraction * L)`` layers of each encoder.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    cfg = model.config
    k_img = math.ceil(fraction * cfg.image_layers) - 1
    k_txt = math.ceil(fraction * cfg.text_layers) - 1
    vis = MediatorSet.layers_up_to(cfg, IMAGE_ENC, k_img)
    lang = MediatorSet.layers_up_to(cfg, TEXT_ENC, k_txt)
    y_O = measure_y(model, samples, threads=threads)
    out = {}
    for label, i, med, module, depth in (
        ("V", Intervention.MASK_GENDER, vis, IMAGE_ENC, k_img),
        ("L", Intervention.REPLACE_GENDER, lang, TEXT_ENC, k_txt),
        ("L+V", Intervention.BOTH, MediatorSet(vis | lang), "TextEnc+ImageEnc", None),
    ):
        y_E = measure_y(model, samples, i, threads=threads)
        out[label] = effects(model, samples, i, med, threads, baseline=(y_O, y_E), module=module, depth=depth)
    return out
