"""Debiasing by feature averaging with an anti-gender counterpart at an encoder's output."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .evaluate import dataset_scores, truth_matrix
from .metrics import BiasScore, average_precision, bias_vl, fpr_table
from .model import Batch, SceneInput, TextInput, ToyVLM, gender_sign_image, gender_sign_text
from .scenes import FEMALE, MALE, LabeledSample, person_appearance

ANTI_GENDER = {
    "man": "woman", "woman": "man",
    "men": "women", "women": "men",
    "male": "female", "female": "male",
    "males": "females", "females": "males",
}


class FairTarget(str, enum.Enum):
    NONE = "None"
    TEXT = "TextFair"
    IMAGE = "ImageFair"
    BOTH = "BothFair"


@dataclass(frozen=True)
class MitigationConfig:
    """``templates[g]`` is the appearance pasted over a person classified as gender ``g``
    (i.e. a face of the other gender). ``None`` means the model's neutral person appearance.
    """

    target: FairTarget = FairTarget.IMAGE
    templates: Optional[Mapping[str, Sequence[float]]] = None

    def template(self, gender: str, appearance_dim: int) -> np.ndarray:
        if self.templates is None:
            return person_appearance(appearance_dim - 1)
        t = np.asarray(self.templates[gender], dtype=np.float64)
        if t.shape != (appearance_dim,):
            raise ValueError(f"template for {gender} must have length {appearance_dim}")
        return t


def anti_gender_text(text: TextInput) -> TextInput:
    gendered = [t for t in text.tokens if t in ANTI_GENDER]
    if len(gendered) > 1:
        raise ValueError(f"text holds more than one gendered term: {text}")
    return TextInput(tuple(ANTI_GENDER.get(t, t) for t in text.tokens))


def counterfactual_scene(scene: SceneInput, cfg: MitigationConfig = MitigationConfig()) -> SceneInput:
    """Locate the person, classify gender by the channel sign, paste the anti-gender template."""
    sign = gender_sign_image(scene)
    if sign == 0:
        return scene
    p = scene.person_cell
    app = scene.appearance.copy()
    app[p] = cfg.template(MALE if sign > 0 else FEMALE, app.shape[1])
    gc = scene.gender_channel.copy()
    gc[p] = -gc[p]
    return SceneInput(scene.cells, gc, app)


def _fair_text_batch(model: ToyVLM, batch: Batch, anti_tokens: np.ndarray) -> np.ndarray:
    orig = model.encode_text(batch.tokens, batch.s_text)
    if np.array_equal(anti_tokens, batch.tokens):
        return orig
    anti = model.encode_text(anti_tokens, -batch.s_text)
    return (orig + anti) / 2.0


def _fair_image_batch(model: ToyVLM, batch: Batch, cf: Batch) -> np.ndarray:
    orig = model.encode_image(batch.appearance, batch.gender_channel, batch.s_img)
    flip = model.encode_image(cf.appearance, cf.gender_channel, cf.s_img)
    out = (orig + flip) / 2.0
    # samples without a person have no counterfactual; keep their encoding bit-exact
    neutral = batch.s_img == 0
    out[neutral] = orig[neutral]
    return out


def text_fair_encode(model: ToyVLM, text: TextInput) -> np.ndarray:
    """Text encoder output averaged with that of the anti-gender sentence."""
    anti = anti_gender_text(text)
    orig = model.encode_text(model.token_ids(text)[None], np.array([gender_sign_text(text)], float))[0]
    if anti == text:
        return orig
    flip = model.encode_text(model.token_ids(anti)[None], np.array([gender_sign_text(anti)], float))[0]
    return (orig + flip) / 2.0


def image_fair_encode(model: ToyVLM, scene: SceneInput, cfg: MitigationConfig = MitigationConfig()) -> np.ndarray:
    """Image encoder output averaged with that of the anti-gender counterfactual scene."""
    def enc(s: SceneInput) -> np.ndarray:
        return model.encode_image(s.appearance[None], s.gender_channel[None], np.array([gender_sign_image(s)], float))[0]

    if gender_sign_image(scene) == 0:
        return enc(scene)
    return (enc(scene) + enc(counterfactual_scene(scene, cfg))) / 2.0


def fair_chunk(model: ToyVLM, cfg: MitigationConfig):
    target = FairTarget(cfg.target)
    fair_text = target in (FairTarget.TEXT, FairTarget.BOTH)
    fair_image = target in (FairTarget.IMAGE, FairTarget.BOTH)

    def run(chunk: Sequence[LabeledSample]):
        batch = model.stack([s.scene for s in chunk], [s.text for s in chunk])
        x_t = x_i = None
        if fair_text:
            anti = np.stack([model.token_ids(anti_gender_text(s.text)) for s in chunk])
            x_t = _fair_text_batch(model, batch, anti)
        if fair_image:
            cf = model.stack([counterfactual_scene(s.scene, cfg) for s in chunk], [s.text for s in chunk])
            x_i = _fair_image_batch(model, batch, cf)
        det = model.run_batch(batch, image_features=x_i, text_features=x_t).detection
        return det.image_scores, det.categories

    return run


@dataclass(frozen=True)
class MitigationReport:
    target: FairTarget
    bias_before: BiasScore
    bias_after: BiasScore
    ap_before: float
    ap_after: float

    @property
    def pct_mitigated(self) -> Optional[float]:
        """Bias reduction in percent; None when there was no bias to begin with."""
        if self.bias_before.value == 0:
            return None
        return (self.bias_before.value - self.bias_after.value) / self.bias_before.value * 100.0 + 0.0


def evaluate_mitigation(
    model: ToyVLM,
    samples: Sequence[LabeledSample],
    cfg: MitigationConfig = MitigationConfig(),
    threads: int = 1,
    before_scores: Optional[np.ndarray] = None,
) -> MitigationReport:
    """Bias score (gendered images) and toy AP (all images) before and after mitigation.

    ``before_scores`` may carry the unmitigated image-level scores when already computed.
    """
    cats = model.config.categories
    truth = truth_matrix(samples, cats)
    before = dataset_scores(model, samples, threads=threads) if before_scores is None else before_scores
    if FairTarget(cfg.target) is FairTarget.NONE:
        after = before
    else:
        after = dataset_scores(model, samples, fair_chunk(model, cfg), threads)
    mask = np.array([s.gender in (MALE, FEMALE) for s in samples])
    genders = [s.gender for s in samples if s.gender in (MALE, FEMALE)]

    def bias(scores):
        return bias_vl(fpr_table(scores[mask], truth[mask], genders, cats, model.config.tau))

    return MitigationReport(
        FairTarget(cfg.target),
        bias(before),
        bias(after),
        average_precision(before, truth, cats).value,
        average_precision(after, truth, cats).value,
    )
