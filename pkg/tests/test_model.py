import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vlbias.cma import Intervention, apply_intervention
from vlbias.evaluate import dataset_scores, toy_average_precision, truth_matrix
from vlbias.metrics import average_precision, average_precision_1d
from vlbias.model import (
    FUSION_IMAGE,
    FUSION_TEXT,
    IMAGE_ENC,
    MODULES,
    TEXT_ENC,
    BiasInjection,
    HeadAddress,
    ModelConfig,
    SceneInput,
    TextInput,
    ToyVLM,
    config_from_dict,
    config_to_dict,
    default_injections,
    gender_sign_image,
    gender_sign_text,
    load_model_config,
    save_model_config,
)
from vlbias.scenes import GenConfig, generate, person_appearance
from vlbias.tensor import HeadHook, HookMode

import oracles

CATS = ModelConfig().categories


def make_scene(cells, person_sign=0, noise_seed=None):
    cells = list(cells) + [None] * (16 - len(cells))
    K = len(CATS)
    app = np.zeros((16, K + 1))
    gc = np.zeros(16)
    for i, c in enumerate(cells):
        if c == "person":
            app[i] = person_appearance(K)
            gc[i] = person_sign
        elif c is not None:
            app[i, CATS.index(c)] = 1.0
    if noise_seed is not None:
        app = app + np.random.default_rng(noise_seed).normal(0, 0.1, app.shape)
    return SceneInput(tuple(cells), gc, app)


def full_prompt(word=None):
    return TextInput.prompt(CATS, word)


def logit_delta(model, reference, scene, text):
    return model.forward(scene, text).detection.scores - reference.forward(scene, text).detection.scores


# ------------------------------------------------------------- gender signs


@pytest.mark.parametrize(
    "tokens,expected",
    [(["cat", ".", "man"], 1), (["cat", ".", "woman"], -1), (["cat", ".", "person"], 0), (["cat", ".", "dog"], 0)],
)
def test_gender_sign_text(tokens, expected):
    assert gender_sign_text(TextInput(tokens)) == expected


def test_gender_sign_text_both_is_error():
    with pytest.raises(ValueError):
        gender_sign_text(TextInput(["man", ".", "woman"]))


def test_gender_sign_image():
    assert gender_sign_image(make_scene(["cup", "person"], -1)) == -1
    assert gender_sign_image(make_scene(["cup", "person"], 1)) == 1
    assert gender_sign_image(make_scene(["cup", "car"])) == 0
    s = generate(GenConfig(n_images=5, seed=1))[0]
    masked = apply_intervention(s, Intervention.MASK_GENDER)
    assert gender_sign_image(masked.scene) == 0


def test_scene_invariants():
    with pytest.raises(ValueError):
        make_scene(["person", "person"], 1)
    with pytest.raises(ValueError):
        SceneInput((None, "cup"), np.array([0.0, 1.0]), np.zeros((2, 7)))
    with pytest.raises(ValueError):
        SceneInput(("person", None), np.array([0.5, 0.0]), np.zeros((2, 7)))
    with pytest.raises(ValueError):
        TextInput(())


def test_prompt_format():
    assert str(TextInput.prompt(["cup", "oven"], "man")) == "cup . oven . man"


# ------------------------------------------------------------ model config


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d=30, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(categories=("cup", "cup"))
    with pytest.raises(ValueError):
        ModelConfig(categories=("cup", "person"))
    with pytest.raises(ValueError):
        ModelConfig(categories=())
    with pytest.raises(ValueError):
        ModelConfig(d=16, n_heads=4)  # head width 4 cannot hold 6 bias coords
    with pytest.raises(ValueError):
        ModelConfig(tau=1.0)


def test_vocab_holds_reserved_tokens():
    vocab = ModelConfig().vocab
    assert "person" in vocab and "." in vocab and "man" in vocab and "woman" in vocab


def test_unknown_token_rejected(base_model):
    with pytest.raises(ValueError, match="dog"):
        base_model.token_ids(TextInput(["dog"]))


def test_weights_depend_only_on_config():
    a = ToyVLM(ModelConfig(seed=3))
    b = ToyVLM(ModelConfig(seed=3))
    c = ToyVLM(ModelConfig(seed=4))
    s, t = make_scene(["cup", "person"], 1, noise_seed=0), full_prompt("man")
    assert a.forward(s, t).detection.scores.tobytes() == b.forward(s, t).detection.scores.tobytes()
    assert a.forward(s, t).detection.scores.tobytes() != c.forward(s, t).detection.scores.tobytes()


def test_config_round_trip(tmp_path):
    cfg = ModelConfig(seed=9, tau=0.4, categories=("cup", "car", "oven"))
    injections = [
        BiasInjection(HeadAddress(IMAGE_ENC, 0, 1), -2.0, "cup"),
        BiasInjection(HeadAddress(TEXT_ENC, 2, 3), 1.5, direction=tuple(np.eye(8)[5])),
    ]
    assert config_from_dict(config_to_dict(cfg, injections)) == (cfg, injections)
    path = tmp_path / "model.json"
    save_model_config(path, cfg, injections)
    assert load_model_config(path) == (cfg, injections)
    bad = config_to_dict(cfg)
    bad["schema_version"] = 2
    with pytest.raises(ValueError, match="schema_version"):
        config_from_dict(bad)


def test_injection_validation(base_model):
    with pytest.raises(ValueError, match="unit"):
        BiasInjection(HeadAddress(IMAGE_ENC, 0, 0), 1.0, direction=(1.0, 1.0))
    with pytest.raises(ValueError):
        BiasInjection(HeadAddress(IMAGE_ENC, 0, 0), 1.0)
    with pytest.raises(ValueError, match="outside"):
        base_model.with_injections([BiasInjection(HeadAddress(IMAGE_ENC, 4, 0), 1.0, "cup")])
    with pytest.raises(ValueError, match="not a model category"):
        base_model.with_injections([BiasInjection(HeadAddress(IMAGE_ENC, 0, 0), 1.0, "dog")])
    with pytest.raises(ValueError, match="length"):
        base_model.with_injections([BiasInjection(HeadAddress(IMAGE_ENC, 0, 0), 1.0, direction=(1.0, 0.0))])
    with pytest.raises(ValueError):
        HeadAddress("Decoder", 0, 0)


def test_last_fusion_text_layer_has_no_path(base_model):
    # text-part heads of the last fusion layer feed no later image-part layer
    with pytest.raises(ValueError, match="no full path"):
        base_model.with_injections([BiasInjection(HeadAddress(FUSION_TEXT, 1, 0), 1.0, "cup")])


# ------------------------------------------------------------ forward pass


def test_score_shape(base_model):
    out = base_model.forward(make_scene(["cup"]), TextInput.prompt(["cup", "car"]))
    assert out.detection.scores.shape == (16, 2)
    assert out.detection.categories == ("cup", "car")
    assert out.detection.image_scores.shape == (2,)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.sampled_from(CATS), min_size=1, max_size=6, unique=True))
def test_score_shape_property(prompt_cats):
    model = _shared_model()
    out = model.forward(make_scene(["cup", "person"], 1), TextInput.prompt(prompt_cats, "man"))
    assert out.detection.scores.shape == (16, len(prompt_cats))
    assert np.array_equal(out.detection.predicted, out.detection.probs > 0.5)
    assert np.array_equal(out.detection.image_predicted, out.detection.predicted.any(axis=0))


_MODEL = {}


def _shared_model():
    if "m" not in _MODEL:
        _MODEL["m"] = ToyVLM(ModelConfig(), default_injections())
    return _MODEL["m"]


def test_untouched_model_detects_present_objects(base_model, small_corpus):
    scores = dataset_scores(base_model, small_corpus)
    truth = truth_matrix(small_corpus, base_model.config.categories)
    assert average_precision(scores, truth, base_model.config.categories).value > 0.9


def test_gender_blind_without_injections(base_model):
    scene_m = make_scene(["cup", "person", "car"], 1, noise_seed=4)
    scene_f = SceneInput(scene_m.cells, -scene_m.gender_channel, scene_m.appearance)
    a = base_model.forward(scene_m, full_prompt("man")).detection.scores
    b = base_model.forward(scene_f, full_prompt("woman")).detection.scores
    c = base_model.forward(scene_f, full_prompt("person")).detection.scores
    assert a.tobytes() == b.tobytes() == c.tobytes()


def test_entangled_mode_is_gender_dependent():
    model = ToyVLM(ModelConfig(entangled=True))
    scene_m = make_scene(["cup", "person"], 1)
    scene_f = SceneInput(scene_m.cells, -scene_m.gender_channel, scene_m.appearance)
    a = model.forward(scene_m, full_prompt("man")).detection.scores
    b = model.forward(scene_f, full_prompt("woman")).detection.scores
    assert not np.array_equal(a, b)


def test_single_path_property(planted_model, base_model, small_corpus):
    zeroed = base_model.with_injections([inj.__class__(inj.at, 0.0, inj.target) for inj in default_injections()])
    both = [apply_intervention(s, Intervention.BOTH) for s in small_corpus]
    a = dataset_scores(zeroed, small_corpus)
    b = dataset_scores(planted_model, both)
    assert a.tobytes() == b.tobytes()


def test_hook_record_substitute_identity(planted_model):
    s, t = make_scene(["oven", "person"], -1, noise_seed=2), full_prompt("woman")
    heads = planted_model.config.all_heads()
    base = planted_model.forward(s, t)
    rec = planted_model.forward(s, t, {a: HeadHook(HookMode.RECORD) for a in heads}).recorded
    assert set(rec) == set(heads)
    out = planted_model.forward(s, t, {a: HeadHook(HookMode.SUBSTITUTE, rec[a]) for a in heads})
    assert out.detection.scores.tobytes() == base.detection.scores.tobytes()


def test_batched_forward_matches_single(planted_model, small_corpus):
    chunk = small_corpus[:7]
    batch = planted_model.stack([s.scene for s in chunk], [s.text for s in chunk])
    batched = planted_model.run_batch(batch).detection.scores
    for i, s in enumerate(chunk):
        single = planted_model.forward(s.scene, s.text).detection.scores
        assert np.allclose(single, batched[i], atol=1e-12)


# ----------------------------------------------------- closed-form logit shift


def _hand_path(model, at):
    """Bias coordinates of a head to the final image readout, from raw weights."""
    w = model._w
    K, dh = model.config.bias_coords, model.config.d_head
    rows = slice((at.head + 1) * dh - K, (at.head + 1) * dh)
    w_o = w["layers"][(at.module, at.layer)].w_o
    if at.module in (IMAGE_ENC, FUSION_IMAGE):
        return w_o[rows, w["readout"]]
    first = 0 if at.module == TEXT_ENC else at.layer + 1
    total = np.zeros((K, K))
    for f in range(first, model.config.fusion_layers):
        wf = w["layers"][(FUSION_IMAGE, f)]
        total = total + wf.w_v[w["carrier"]] @ wf.w_o[:, w["readout"]]
    return w_o[rows, w["carrier"]] @ total


@pytest.mark.parametrize(
    "at",
    [
        HeadAddress(IMAGE_ENC, 3, 0),
        HeadAddress(IMAGE_ENC, 0, 2),
        HeadAddress(FUSION_IMAGE, 1, 3),
        HeadAddress(TEXT_ENC, 3, 0),
        HeadAddress(TEXT_ENC, 0, 1),
        HeadAddress(FUSION_TEXT, 0, 2),
    ],
)
@pytest.mark.parametrize("target", ["car", "oven"])
def test_logit_shift_closed_form(base_model, at, target):
    alpha = 1.7
    model = base_model.with_injections([BiasInjection(at, alpha, target)])
    s_word = "woman"
    scene = make_scene(["cup", "person", "bicycle"], -1, noise_seed=8)
    text = full_prompt(s_word)
    shifted = model.forward(scene, text).detection.scores
    plain = base_model.forward(scene, text).detection.scores
    sign = -1.0
    u = np.asarray(model.injections[0].direction)[-model.config.bias_coords:]
    code = base_model._w["tok"][: len(CATS), base_model._w["readout"]]
    expected = alpha * sign * (u @ _hand_path(base_model, at) @ code.T) / math.sqrt(model.config.d)
    # every cell shifts by the same amount, only for the target
    assert np.max(np.abs((shifted - plain) - expected[None, :])) < 1e-9
    j = CATS.index(target)
    assert abs(expected[j]) > 0.05
    others = np.delete(expected, j)
    assert np.max(np.abs(others)) < 1e-12
    # and the magnitude is alpha / (|coords| sqrt(d)) with coords solving coords @ path = e_target
    coords = np.linalg.solve(_hand_path(base_model, at).T, np.eye(len(CATS))[j])
    assert expected[j] == pytest.approx(alpha * sign / (np.linalg.norm(coords) * math.sqrt(32)), rel=1e-9)


def test_image_head_shift_magnitude(base_model):
    # orthogonal per-head maps give |coords| = 1 for image-reading heads
    at = HeadAddress(IMAGE_ENC, 3, 0)
    model = base_model.with_injections([BiasInjection(at, 2.0, "car")])
    scene = make_scene(["cup", "person"], 1)
    delta = logit_delta(model, base_model, scene, full_prompt("man"))
    assert np.allclose(delta[:, CATS.index("car")], 2.0 / math.sqrt(32), atol=1e-12)


def test_injection_gain_matches_hand_path(base_model):
    for at in [HeadAddress(m, 0, 1) for m in MODULES]:
        code = base_model._w["tok"][CATS.index("cup"), base_model._w["readout"]]
        gain = base_model.injection_gain(at, "cup")
        assert np.allclose(gain[-6:], _hand_path(base_model, at) @ code, atol=1e-15)
        assert np.all(gain[:-6] == 0)


def test_direction_injection_is_used_verbatim(base_model):
    u = tuple(np.eye(8)[7])
    model = base_model.with_injections([BiasInjection(HeadAddress(IMAGE_ENC, 1, 1), 1.0, direction=u)])
    assert model.injections[0].direction == u


def test_planted_injections_shift_only_their_targets(base_model):
    scene = make_scene(["person"], 1)
    for inj in default_injections():
        model = base_model.with_injections([inj])
        delta = logit_delta(model, base_model, scene, full_prompt("man"))
        j = CATS.index(inj.target)
        assert np.sign(delta[0, j]) == np.sign(inj.alpha)
        assert np.max(np.abs(np.delete(delta, j, axis=1))) < 1e-9


def test_neutral_sample_unaffected_by_injections(planted_model, base_model):
    scene = make_scene(["cup", "car"], noise_seed=1)
    text = full_prompt()
    a = planted_model.forward(scene, text).detection.scores
    b = base_model.forward(scene, text).detection.scores
    assert a.tobytes() == b.tobytes()


# -------------------------------------------------------------------- AP


def test_ap_perfect_scores():
    truth = np.array([[1, 0], [0, 1], [1, 1], [0, 0]], dtype=bool)
    res = average_precision(truth.astype(float), truth, ["a", "b"])
    assert res.value == 1.0


def test_ap_constant_ranker_equals_prevalence():
    labels = np.array([1, 0, 0, 1, 0, 0, 0, 1, 0, 0], dtype=bool)
    assert average_precision_1d(np.full(10, 0.3), labels) == pytest.approx(0.3, abs=1e-15)


def test_ap_reversed_scores_give_minimum():
    labels = np.array([1, 1, 0, 0, 0, 1, 0], dtype=bool)
    perfect = labels.astype(float) + np.linspace(0, 0.1, 7)
    reversed_ = -perfect
    brute = min(
        oracles.average_precision(list(np.argsort(p).astype(float)), list(labels))
        for p in itertools.permutations(range(7))
    )
    assert average_precision_1d(reversed_, labels) == pytest.approx(brute, abs=1e-15)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 5), st.booleans()), min_size=1, max_size=30).filter(
        lambda xs: any(y for _, y in xs)
    )
)
def test_ap_matches_oracle(pairs):
    scores = [float(s) for s, _ in pairs]
    labels = [y for _, y in pairs]
    got = average_precision_1d(np.array(scores), np.array(labels))
    assert got == pytest.approx(oracles.average_precision(scores, labels), abs=1e-12)
    assert 0.0 < got <= 1.0


def test_ap_requires_positives_and_reports_exclusions():
    with pytest.raises(ValueError):
        average_precision_1d(np.zeros(3), np.zeros(3, dtype=bool))
    truth = np.array([[1, 0], [0, 0]], dtype=bool)
    res = average_precision(np.array([[0.9, 0.1], [0.1, 0.2]]), truth, ["a", "b"])
    assert res.excluded == ("b",)
    assert res.value == 1.0


def test_toy_average_precision(planted_model, small_corpus):
    res = toy_average_precision(planted_model, small_corpus)
    assert 0.0 < res.value <= 1.0
    with pytest.raises(ValueError):
        toy_average_precision(planted_model, [])
