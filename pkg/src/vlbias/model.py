"""A small dual-stream detector with planted, exactly known gender-bias pathways.

Architecture: text encoder and image encoder (self-attention stacks), a deep
fusion stack in which every layer has an image part (image queries attend to
text) and a text part (text queries attend to image) computed from the same
layer input, and a word-region alignment head scoring every grid cell against
every category token of the prompt.

Residual layout. Dim 0 is a pass-through detection-offset channel; dims
1..``n_content - 1`` carry content; the last ``2K`` dims (``K`` categories)
form a write-only bias channel split into ``carrier`` (text-side gender,
readable only by the value projection of fusion image-part heads) and
``readout`` (read only by the detection head). Category tokens hold
orthogonal codes in the readout, so a bias vector can move one category's
logit and leave the others untouched. Query/key projections never read the
bias channel, so attention patterns are gender independent. Each head
reserves its last ``K`` output coordinates for the bias channel, mapped
orthogonally into it; planted injections live there.

In the default side-channel mode, gender never enters the embeddings: the
scene's ``gender_channel`` and the text's gender word are read only by the
injections. ``man``, ``woman`` and ``person`` share one embedding.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .tensor import AttentionWeights, HeadHook, layer_norm, mha_forward, seeded_init

TEXT_ENC = "TextEnc"
IMAGE_ENC = "ImageEnc"
FUSION_TEXT = "FusionTextPart"
FUSION_IMAGE = "FusionImagePart"
MODULES = (TEXT_ENC, IMAGE_ENC, FUSION_TEXT, FUSION_IMAGE)
IMAGE_READING = frozenset({IMAGE_ENC, FUSION_IMAGE})

PERSON, MAN, WOMAN, SEP = "person", "man", "woman", "."
SPECIAL_TOKENS = (PERSON, MAN, WOMAN, SEP)

MODEL_SCHEMA_VERSION = 1

DEFAULT_INDOOR = ("couch", "oven", "cup")
DEFAULT_OUTDOOR = ("car", "bicycle", "skateboard")
DEFAULT_CATEGORIES = DEFAULT_INDOOR + DEFAULT_OUTDOOR


@dataclass(frozen=True, order=True)
class HeadAddress:
    module: str
    layer: int
    head: int

    def __post_init__(self) -> None:
        if self.module not in MODULES:
            raise ValueError(f"unknown module {self.module!r}; expected one of {MODULES}")
        if self.layer < 0 or self.head < 0:
            raise ValueError(f"negative index in {self}")

    def __str__(self) -> str:
        return f"{self.module}.L{self.layer}.H{self.head}"


@dataclass(frozen=True)
class ModelConfig:
    categories: tuple[str, ...] = DEFAULT_CATEGORIES
    d: int = 32
    n_heads: int = 4
    text_layers: int = 4
    image_layers: int = 4
    fusion_layers: int = 2
    grid: int = 4
    seed: int = 0
    tau: float = 0.5
    attn_scale: float = 0.25
    value_scale: float = 0.2
    out_scale: float = 0.1
    transfer_scale: float = 0.5
    code_scale: float = 1.0
    detect_offset: float = 10.5
    entangled: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "categories", tuple(self.categories))
        if not self.categories:
            raise ValueError("model needs at least one category")
        if len(set(self.categories)) != len(self.categories):
            raise ValueError("duplicate category names")
        clash = set(self.categories) & set(SPECIAL_TOKENS)
        if clash:
            raise ValueError(f"category names collide with reserved tokens: {sorted(clash)}")
        if self.n_heads < 1 or self.d % self.n_heads:
            raise ValueError(f"d={self.d} must be divisible by n_heads={self.n_heads}")
        K = len(self.categories)
        if self.d // self.n_heads <= K:
            raise ValueError(f"head width {self.d // self.n_heads} must exceed the {K} categories")
        if self.d - 2 * K < 2:
            raise ValueError(f"d={self.d} leaves no content dims beside a {2 * K}-dim bias channel")
        for name in ("text_layers", "image_layers", "fusion_layers", "grid"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")

    @property
    def vocab(self) -> tuple[str, ...]:
        return self.categories + SPECIAL_TOKENS

    @property
    def d_head(self) -> int:
        return self.d // self.n_heads

    @property
    def bias_coords(self) -> int:
        """Per-head output coordinates reserved for the bias channel (one per category)."""
        return len(self.categories)

    @property
    def n_content(self) -> int:
        """Residual dims outside the bias channel, the offset dim included."""
        return self.d - 2 * len(self.categories)

    @property
    def n_cells(self) -> int:
        return self.grid * self.grid

    @property
    def appearance_dim(self) -> int:
        return len(self.categories) + 1

    def layers(self, module: str) -> int:
        return {
            TEXT_ENC: self.text_layers,
            IMAGE_ENC: self.image_layers,
            FUSION_TEXT: self.fusion_layers,
            FUSION_IMAGE: self.fusion_layers,
        }[module]

    def all_heads(self, module: Optional[str] = None) -> list[HeadAddress]:
        mods = MODULES if module is None else (module,)
        return [
            HeadAddress(m, l, h)
            for m in mods
            for l in range(self.layers(m))
            for h in range(self.n_heads)
        ]

    def check_address(self, at: HeadAddress) -> None:
        if at.layer >= self.layers(at.module) or at.head >= self.n_heads:
            raise ValueError(f"{at} is outside the model ({self.layers(at.module)} layers, {self.n_heads} heads)")


@dataclass(frozen=True)
class BiasInjection:
    """Adds ``alpha * s * u`` to one head's output at every position.

    ``s`` is the sample's text gender sign for text-reading modules and its
    image gender sign for image-reading ones (+1 male, -1 female, 0 none).
    When ``direction`` is omitted the model derives it from ``target`` so that
    positive ``alpha * s`` raises the target category's alignment logit.
    """

    at: HeadAddress
    alpha: float
    target: Optional[str] = None
    direction: Optional[tuple[float, ...]] = None

    def __post_init__(self) -> None:
        if self.direction is not None:
            u = np.asarray(self.direction, dtype=np.float64)
            if abs(float(np.linalg.norm(u)) - 1.0) > 1e-9:
                raise ValueError(f"injection direction at {self.at} is not unit length")
            object.__setattr__(self, "direction", tuple(float(x) for x in u))
        elif self.target is None:
            raise ValueError(f"injection at {self.at} needs a target or a direction")

    @property
    def reads_image(self) -> bool:
        return self.at.module in IMAGE_READING


# --------------------------------------------------------------------- inputs


@dataclass(frozen=True)
class SceneInput:
    """A grid image. ``cells[i]`` is a category name, ``"person"`` or ``None``."""

    cells: tuple[Optional[str], ...]
    gender_channel: np.ndarray
    appearance: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "cells", tuple(self.cells))
        gc = np.asarray(self.gender_channel, dtype=np.float64)
        app = np.asarray(self.appearance, dtype=np.float64)
        n = len(self.cells)
        if gc.shape != (n,) or app.ndim != 2 or app.shape[0] != n:
            raise ValueError("gender_channel/appearance do not match the cell count")
        persons = [i for i, c in enumerate(self.cells) if c == PERSON]
        if len(persons) > 1:
            raise ValueError("a scene holds at most one person cell")
        bad = [i for i in np.flatnonzero(gc) if i not in persons]
        if bad:
            raise ValueError(f"gender_channel nonzero outside the person cell at {bad}")
        if not np.all(np.isin(gc, (-1.0, 0.0, 1.0))):
            raise ValueError("gender_channel values must be in {-1, 0, +1}")
        gc.setflags(write=False)
        app.setflags(write=False)
        object.__setattr__(self, "gender_channel", gc)
        object.__setattr__(self, "appearance", app)

    @property
    def person_cell(self) -> Optional[int]:
        for i, c in enumerate(self.cells):
            if c == PERSON:
                return i
        return None

    def objects(self) -> frozenset[str]:
        return frozenset(c for c in self.cells if c is not None and c != PERSON)


@dataclass(frozen=True)
class TextInput:
    tokens: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if not self.tokens:
            raise ValueError("empty text")

    @classmethod
    def prompt(cls, categories: Iterable[str], gender_word: Optional[str] = None) -> "TextInput":
        """Build ``"c1 . c2 . ... . ck"`` optionally followed by ``". <gender_word>"``."""
        toks: list[str] = []
        for c in categories:
            if toks:
                toks.append(SEP)
            toks.append(c)
        if gender_word is not None:
            toks += [SEP, gender_word]
        return cls(tuple(toks))

    def __str__(self) -> str:
        return " ".join(self.tokens)


def gender_sign_text(text: TextInput) -> int:
    has_man = MAN in text.tokens
    has_woman = WOMAN in text.tokens
    if has_man and has_woman:
        raise ValueError(f"text mentions both genders: {text}")
    return 1 if has_man else -1 if has_woman else 0


def gender_sign_image(scene: SceneInput) -> int:
    p = scene.person_cell
    return 0 if p is None else int(scene.gender_channel[p])


# -------------------------------------------------------------------- outputs


@dataclass
class DetectionOutput:
    scores: np.ndarray  # (cells, categories) alignment logits
    categories: tuple[str, ...]
    tau: float

    @property
    def probs(self) -> np.ndarray:
        return _sigmoid(self.scores)

    @property
    def predicted(self) -> np.ndarray:
        return self.probs > self.tau

    @property
    def image_scores(self) -> np.ndarray:
        """Image-level score per category: max cell probability."""
        return self.probs.max(axis=-2)

    @property
    def image_predicted(self) -> np.ndarray:
        return self.predicted.any(axis=-2)


@dataclass
class ForwardResult:
    detection: DetectionOutput
    image_features: np.ndarray
    text_features: np.ndarray
    recorded: dict[HeadAddress, np.ndarray] = field(default_factory=dict)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------- model


def _derived_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class ToyVLM:
    """Immutable planted-bias detector. Weights are a pure function of ``config``."""

    def __init__(
        self,
        config: ModelConfig = ModelConfig(),
        injections: Sequence[BiasInjection] = (),
        _weights: Optional[dict] = None,
    ):
        self.config = config
        self._w = _weights if _weights is not None else self._build_weights(config)
        self._token_index = {t: i for i, t in enumerate(config.vocab)}
        resolved = []
        for inj in injections:
            config.check_address(inj.at)
            resolved.append(self._resolve(inj))
        self.injections: tuple[BiasInjection, ...] = tuple(resolved)

    # -- construction ---------------------------------------------------

    @staticmethod
    def _build_weights(cfg: ModelConfig) -> dict:
        d, H, dh, K = cfg.d, cfg.n_heads, cfg.d_head, cfg.bias_coords
        nc = cfg.n_content
        carrier = slice(nc, nc + K)
        readout = slice(nc + K, d)
        dims = np.arange(d)
        content_rows = np.concatenate([np.arange(h * dh, h * dh + dh - K) for h in range(H)])

        def init(name: str, rows: int, cols: int, scale: float) -> np.ndarray:
            return seeded_init(_derived_seed(cfg.seed, name), rows, cols, scale)

        def orthogonal(name: str) -> np.ndarray:
            q, r = np.linalg.qr(init(name, K, K, 1.0))
            return q * np.where(np.diag(r) < 0, -1.0, 1.0)

        layers: dict[tuple[str, int], AttentionWeights] = {}
        for m in MODULES:
            for l in range(cfg.layers(m)):
                tag = f"{m}.{l}"
                w_q = np.zeros((d, d))
                w_k = np.zeros((d, d))
                w_v = np.zeros((d, d))
                w_o = np.zeros((d, d))
                w_q[:nc] = init(tag + ".q", nc, d, cfg.attn_scale)
                w_k[:nc] = init(tag + ".k", nc, d, cfg.attn_scale)
                w_v[:nc, content_rows] = init(tag + ".v", nc, len(content_rows), cfg.value_scale)
                w_o[np.ix_(content_rows, dims[:nc])] = init(tag + ".o", len(content_rows), nc, cfg.out_scale)
                target = dims[readout] if m in IMAGE_READING else dims[carrier]
                for h in range(H):
                    rows = np.arange((h + 1) * dh - K, (h + 1) * dh)
                    ob = orthogonal(f"{tag}.ob{h}")
                    w_o[np.ix_(rows, target)] = ob
                    if m == FUSION_IMAGE:
                        # carrier -> head bias coords -> readout sums to transfer_scale * I per layer
                        w_v[np.ix_(dims[carrier], rows)] = ob.T * (cfg.transfer_scale / H)
                # dim 0 is the detection-offset channel: never read, never written
                w_q[0] = w_k[0] = w_v[0] = 0.0
                w_o[:, 0] = 0.0
                layers[(m, l)] = AttentionWeights(w_q, w_k, w_v, w_o, H)

        V = len(cfg.vocab)
        tok = np.zeros((V, d))
        tok[:, :nc] = init("embed.text", V, nc, 1.0)
        idx = {t: i for i, t in enumerate(cfg.vocab)}
        tok[idx[MAN]] = tok[idx[PERSON]]
        tok[idx[WOMAN]] = tok[idx[PERSON]]
        if cfg.entangled:
            gvec = init("embed.text.gender", 1, nc, 1.0)[0]
            gvec[0] = 0.0
            tok[idx[MAN], :nc] += gvec
            tok[idx[WOMAN], :nc] -= gvec
        tok[:K, readout] = cfg.code_scale * np.eye(K)
        # dim 0 acts as a detection offset: cells carry +1 there
        tok[:K, 0] = -cfg.detect_offset
        tok[K:, 0] = 0.0

        app = np.zeros((cfg.appearance_dim, d))
        app[:K, :nc] = tok[:K, :nc]
        app[:K, 0] = 0.0
        app[K, :nc] = init("embed.person", 1, nc, 1.0)[0]
        app[K, 0] = 0.0
        cell_bias = np.zeros(d)
        cell_bias[0] = 1.0
        img_gender = None
        if cfg.entangled:
            img_gender = np.zeros(d)
            img_gender[1:nc] = init("embed.image.gender", 1, nc, 1.0)[0, 1:]

        return {
            "layers": layers,
            "tok": tok,
            "app": app,
            "cell_bias": cell_bias,
            "img_gender": img_gender,
            "carrier": carrier,
            "readout": readout,
        }

    def _resolve(self, inj: BiasInjection) -> BiasInjection:
        if inj.direction is not None:
            if len(inj.direction) != self.config.d_head:
                raise ValueError(f"injection direction at {inj.at} must have length {self.config.d_head}")
            return inj
        if inj.target not in self.config.categories:
            raise ValueError(f"injection target {inj.target!r} is not a model category")
        path = self.bias_path(inj.at)
        K = self.config.bias_coords
        if np.linalg.matrix_rank(path) < K:
            raise ValueError(f"injection at {inj.at} has no full path to the detection head")
        # solve u @ path = e_target: moves the target's readout only
        coords = np.linalg.solve(path.T, np.eye(K)[self.config.categories.index(inj.target)])
        u = np.zeros(self.config.d_head)
        u[-K:] = coords / np.linalg.norm(coords)
        return replace(inj, direction=tuple(float(x) for x in u))

    def bias_path(self, at: HeadAddress) -> np.ndarray:
        """Linear map from a head's bias coordinates to the final image readout (K x K)."""
        cfg = self.config
        cfg.check_address(at)
        dh, K = cfg.d_head, cfg.bias_coords
        rows = slice((at.head + 1) * dh - K, (at.head + 1) * dh)
        w_o = self._w["layers"][(at.module, at.layer)].w_o
        if at.module in IMAGE_READING:
            return w_o[rows, self._w["readout"]]
        first = 0 if at.module == TEXT_ENC else at.layer + 1
        transfer = sum((self.transfer_matrix(f) for f in range(first, cfg.fusion_layers)), np.zeros((K, K)))
        return w_o[rows, self._w["carrier"]] @ transfer

    def injection_gain(self, at: HeadAddress, category: str) -> np.ndarray:
        """Gradient of ``sqrt(d)`` times a category's logit w.r.t. the injected head vector."""
        K = self.config.bias_coords
        code = self._w["tok"][self.config.categories.index(category), self._w["readout"]]
        gain = np.zeros(self.config.d_head)
        gain[-K:] = self.bias_path(at) @ code
        return gain

    def transfer_matrix(self, fusion_layer: int) -> np.ndarray:
        """Linear map from the text carrier channel to the image readout channel at one fusion layer."""
        w = self._w["layers"][(FUSION_IMAGE, fusion_layer)]
        carrier, readout = self._w["carrier"], self._w["readout"]
        return w.w_v[carrier] @ w.w_o[:, readout]

    def with_injections(self, injections: Sequence[BiasInjection]) -> "ToyVLM":
        return ToyVLM(self.config, injections, _weights=self._w)

    def clamped(self, addresses: Iterable[HeadAddress], image: bool = True, text: bool = True) -> "ToyVLM":
        """Copy with the injections at ``addresses`` disabled (alpha=0), per modality read."""
        addrs = set(addresses)
        out = []
        for inj in self.injections:
            hit = inj.at in addrs and ((inj.reads_image and image) or (not inj.reads_image and text))
            out.append(replace(inj, alpha=0.0) if hit else inj)
        return self.with_injections(out)

    # -- tokenization / batching ----------------------------------------

    def token_ids(self, text: TextInput) -> np.ndarray:
        try:
            return np.array([self._token_index[t] for t in text.tokens], dtype=np.int64)
        except KeyError as exc:
            raise ValueError(f"token {exc.args[0]!r} not in vocabulary") from None

    def prompt_categories(self, text: TextInput) -> tuple[tuple[str, ...], tuple[int, ...]]:
        cats, pos, seen = [], [], set()
        for i, t in enumerate(text.tokens):
            if t in self.config.categories and t not in seen:
                seen.add(t)
                cats.append(t)
                pos.append(i)
        return tuple(cats), tuple(pos)

    def stack(self, scenes: Sequence[SceneInput], texts: Sequence[TextInput]) -> "Batch":
        """Pack samples whose prompts share one token layout into arrays."""
        if len(scenes) != len(texts) or not scenes:
            raise ValueError("stack needs equal, nonzero numbers of scenes and texts")
        cfg = self.config
        cats, pos = self.prompt_categories(texts[0])
        ids = [self.token_ids(t) for t in texts]
        if any(len(i) != len(ids[0]) for i in ids):
            raise ValueError("texts in one batch must have equal length")
        for t in texts[1:]:
            if self.prompt_categories(t) != (cats, pos):
                raise ValueError("texts in one batch must share a category layout")
        for s in scenes:
            if len(s.cells) != cfg.n_cells or s.appearance.shape[1] != cfg.appearance_dim:
                raise ValueError("scene shape does not match the model grid/appearance size")
        return Batch(
            appearance=np.stack([s.appearance for s in scenes]),
            gender_channel=np.stack([s.gender_channel for s in scenes]),
            tokens=np.stack(ids),
            s_img=np.array([gender_sign_image(s) for s in scenes], dtype=np.float64),
            s_text=np.array([gender_sign_text(t) for t in texts], dtype=np.float64),
            categories=cats,
            category_positions=pos,
        )

    # -- forward pieces -------------------------------------------------

    def _prenorm(self, x: np.ndarray) -> np.ndarray:
        nc = self.config.n_content
        ones, zeros = np.ones(nc - 1), np.zeros(nc - 1)
        return np.concatenate([x[..., :1], layer_norm(x[..., 1:nc], ones, zeros), x[..., nc:]], axis=-1)

    def _injection_vectors(self, module: str, layer: int, sign: np.ndarray) -> dict[int, np.ndarray]:
        vecs: dict[int, np.ndarray] = {}
        for inj in self.injections:
            if inj.at.module == module and inj.at.layer == layer:
                v = inj.alpha * sign[:, None, None] * np.asarray(inj.direction)[None, None, :]
                vecs[inj.at.head] = vecs[inj.at.head] + v if inj.at.head in vecs else v
        return vecs

    @staticmethod
    def _layer_hooks(hooks: Mapping[HeadAddress, HeadHook], module: str, layer: int) -> dict[int, HeadHook]:
        return {a.head: hk for a, hk in hooks.items() if a.module == module and a.layer == layer}

    def _attend(self, module, layer, x_q, x_kv, sign, hooks, recorded):
        out, rec = mha_forward(
            self._prenorm(x_q),
            self._prenorm(x_kv),
            self._w["layers"][(module, layer)],
            self._layer_hooks(hooks, module, layer),
            self._injection_vectors(module, layer, sign),
        )
        for h, buf in rec.items():
            recorded[HeadAddress(module, layer, h)] = buf
        return out

    def embed_text(self, tokens: np.ndarray) -> np.ndarray:
        return self._w["tok"][tokens]

    def embed_image(self, appearance: np.ndarray, gender_channel: np.ndarray) -> np.ndarray:
        x = appearance @ self._w["app"] + self._w["cell_bias"]
        if self._w["img_gender"] is not None:
            x = x + gender_channel[..., None] * self._w["img_gender"]
        return x

    def encode_text(self, tokens, s_text, hooks=None, recorded=None) -> np.ndarray:
        hooks = hooks or {}
        recorded = {} if recorded is None else recorded
        x = self.embed_text(tokens)
        for l in range(self.config.text_layers):
            x = x + self._attend(TEXT_ENC, l, x, x, s_text, hooks, recorded)
        return x

    def encode_image(self, appearance, gender_channel, s_img, hooks=None, recorded=None) -> np.ndarray:
        hooks = hooks or {}
        recorded = {} if recorded is None else recorded
        x = self.embed_image(appearance, gender_channel)
        for l in range(self.config.image_layers):
            x = x + self._attend(IMAGE_ENC, l, x, x, s_img, hooks, recorded)
        return x

    def fuse(self, x_img, x_txt, s_img, s_text, hooks=None, recorded=None):
        hooks = hooks or {}
        recorded = {} if recorded is None else recorded
        for l in range(self.config.fusion_layers):
            d_img = self._attend(FUSION_IMAGE, l, x_img, x_txt, s_img, hooks, recorded)
            d_txt = self._attend(FUSION_TEXT, l, x_txt, x_img, s_text, hooks, recorded)
            x_img, x_txt = x_img + d_img, x_txt + d_txt
        return x_img, x_txt

    def detect(self, x_img: np.ndarray, x_txt: np.ndarray, positions: Sequence[int]) -> np.ndarray:
        t = x_txt[..., list(positions), :]
        return x_img @ np.swapaxes(t, -1, -2) / math.sqrt(self.config.d)

    def run_batch(
        self,
        batch: "Batch",
        hooks: Optional[Mapping[HeadAddress, HeadHook]] = None,
        image_features: Optional[np.ndarray] = None,
        text_features: Optional[np.ndarray] = None,
    ) -> ForwardResult:
        """Batched forward pass. Encoder outputs may be supplied precomputed."""
        hooks = dict(hooks or {})
        for a in hooks:
            self.config.check_address(a)
        recorded: dict[HeadAddress, np.ndarray] = {}
        x_t = text_features
        if x_t is None:
            x_t = self.encode_text(batch.tokens, batch.s_text, hooks, recorded)
        x_i = image_features
        if x_i is None:
            x_i = self.encode_image(batch.appearance, batch.gender_channel, batch.s_img, hooks, recorded)
        x_i, x_t = self.fuse(x_i, x_t, batch.s_img, batch.s_text, hooks, recorded)
        scores = self.detect(x_i, x_t, batch.category_positions)
        return ForwardResult(DetectionOutput(scores, batch.categories, self.config.tau), x_i, x_t, recorded)

    def forward(
        self,
        scene: SceneInput,
        text: TextInput,
        hooks: Optional[Mapping[HeadAddress, HeadHook]] = None,
    ) -> ForwardResult:
        """Single-sample forward. Hook buffers are per-sample, shape (positions, d_head)."""
        batched = {
            a: HeadHook(hk.mode, None if hk.buffer is None else np.asarray(hk.buffer)[None])
            for a, hk in (hooks or {}).items()
        }
        res = self.run_batch(self.stack([scene], [text]), batched)
        det = res.detection
        return ForwardResult(
            DetectionOutput(det.scores[0], det.categories, det.tau),
            res.image_features[0],
            res.text_features[0],
            {a: b[0] for a, b in res.recorded.items()},
        )


@dataclass
class Batch:
    appearance: np.ndarray
    gender_channel: np.ndarray
    tokens: np.ndarray
    s_img: np.ndarray
    s_text: np.ndarray
    categories: tuple[str, ...]
    category_positions: tuple[int, ...]

    def __len__(self) -> int:
        return self.tokens.shape[0]


# -------------------------------------------------------------- serialization


def default_injections() -> list[BiasInjection]:
    """The planted configuration used by the acceptance suite.

    Image-reading injections are stronger than their text-reading
    counterparts, in both the encoders and the fusion stack. Negative alpha
    favours the target for female inputs, positive alpha for male ones.
    """
    H = HeadAddress
    return [
        BiasInjection(H(IMAGE_ENC, 0, 1), -4.0, "couch"),
        BiasInjection(H(IMAGE_ENC, 1, 3), 4.0, "car"),
        BiasInjection(H(IMAGE_ENC, 2, 0), -4.0, "cup"),
        BiasInjection(H(IMAGE_ENC, 3, 2), 4.0, "skateboard"),
        BiasInjection(H(TEXT_ENC, 1, 0), -2.5, "cup"),
        BiasInjection(H(TEXT_ENC, 2, 1), 2.5, "bicycle"),
        BiasInjection(H(FUSION_IMAGE, 0, 0), -3.5, "oven"),
        BiasInjection(H(FUSION_IMAGE, 1, 1), 3.5, "bicycle"),
        BiasInjection(H(FUSION_TEXT, 0, 2), -2.5, "cup"),
    ]


def config_to_dict(config: ModelConfig, injections: Sequence[BiasInjection] = ()) -> dict:
    cfg = {k: getattr(config, k) for k in config.__dataclass_fields__}
    cfg["categories"] = list(config.categories)
    return {
        "schema_version": MODEL_SCHEMA_VERSION,
        "model": cfg,
        "injections": [injection_to_dict(i) for i in injections],
    }


def injection_to_dict(inj: BiasInjection) -> dict:
    out = {
        "module": inj.at.module,
        "layer": inj.at.layer,
        "head": inj.at.head,
        "alpha": inj.alpha,
    }
    if inj.target is not None:
        out["target"] = inj.target
    if inj.direction is not None:
        out["direction"] = list(inj.direction)
    return out


def injection_from_dict(d: Mapping) -> BiasInjection:
    direction = d.get("direction")
    return BiasInjection(
        HeadAddress(d["module"], int(d["layer"]), int(d["head"])),
        float(d["alpha"]),
        d.get("target"),
        None if direction is None else tuple(direction),
    )


def config_from_dict(d: Mapping) -> tuple[ModelConfig, list[BiasInjection]]:
    version = d.get("schema_version")
    if version != MODEL_SCHEMA_VERSION:
        raise ValueError(f"unsupported model schema_version {version!r}")
    cfg = ModelConfig(**dict(d.get("model", {})))
    return cfg, [injection_from_dict(i) for i in d.get("injections", [])]


def save_model_config(path, config: ModelConfig, injections: Sequence[BiasInjection] = ()) -> None:
    Path(path).write_text(json.dumps(config_to_dict(config, injections), indent=2, sort_keys=True) + "\n")


def load_model_config(path) -> tuple[ModelConfig, list[BiasInjection]]:
    import yaml

    return config_from_dict(yaml.safe_load(Path(path).read_text()))
