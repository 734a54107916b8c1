import math

import numpy as np
import pytest

import ddnkit.training as training
from oracles import metric_oracle
from ddnkit.ads import attach_aux_branch, parse_directive, placement_from_directive
from ddnkit.data_io import SegSample, SyntheticConfig, generate_synthetic
from ddnkit.netspec import SpecSyntaxError, build_graph, parse_spec
from ddnkit.objsize import MaskImage, estimate_obj
from ddnkit.tensor import Tensor
from ddnkit.training import (
    LOG_HEADER,
    AdamState,
    CheckpointError,
    MetricsRecord,
    NonFiniteGradient,
    TrainConfig,
    TrainingDiverged,
    adam_step,
    augment,
    ce_loss,
    confusion,
    decode_checkpoint,
    dice_loss,
    encode_checkpoint,
    evaluate,
    graph_from_checkpoint,
    init_rng,
    jaccard_loss,
    load_checkpoint,
    mask_metrics,
    parse_config,
    save_checkpoint,
    split_dataset,
    target_tensor,
    train,
)

TINY = "stages 2\nstage 1 convs=1 channels=4\nstage 2 convs=1 channels=8\n"


def tiny_graph(seed=0, text=TINY):
    return build_graph(parse_spec(text), init_rng(seed))


def tiny_data(count=4, size=16, seed=0):
    return generate_synthetic(SyntheticConfig(count=count, size=size, min_radius=3, max_radius=5, max_objects=1, seed=seed))


def prob(values):
    return Tensor(np.asarray(values, dtype=float).reshape(1, 1, 1, -1))


# ------------------------------------------------------------------ losses


def test_perfect_prediction_has_zero_loss():
    t = np.array([0.0, 1.0, 1.0, 0.0]).reshape(1, 1, 1, 4)
    assert ce_loss(prob([0, 1, 1, 0]), t).item() == pytest.approx(0.0, abs=1e-11)
    assert dice_loss(prob([0, 1, 1, 0]), t).item() == 0.0
    assert jaccard_loss(prob([0, 1, 1, 0]), t).item() == 0.0


def test_half_probability_costs_ln2():
    t = np.array([0.0, 1.0]).reshape(1, 1, 1, 2)
    assert ce_loss(prob([0.5, 0.5]), t).item() == pytest.approx(math.log(2), rel=1e-14)


def test_multiclass_ce():
    p = Tensor(np.array([0.2, 0.5, 0.3]).reshape(1, 3, 1, 1))
    t = target_tensor([MaskImage(np.array([[1]]), 3)], 3)
    assert ce_loss(p, t).item() == pytest.approx(-math.log(0.5))


def test_clamped_ce_is_finite():
    t = np.ones((1, 1, 1, 1))
    assert ce_loss(prob([0.0]), t).item() == pytest.approx(-math.log(1e-12))


def test_dice_loss_smoothing():
    t = np.array([1.0, 0.0]).reshape(1, 1, 1, 2)
    # 1 - (2*0.5 + 1) / (0.5 + 0.5 + 1 + 1)
    assert dice_loss(prob([0.5, 0.5]), t).item() == pytest.approx(1 - 2 / 3)


def test_loss_shape_mismatch():
    with pytest.raises(Exception, match="prediction/target"):
        dice_loss(prob([0.5, 0.5]), np.zeros((1, 1, 1, 3)))


def test_target_tensor():
    m = MaskImage(np.array([[0, 2], [1, 0]]), 3)
    np.testing.assert_array_equal(target_tensor([m], 1)[0, 0], [[0, 1], [1, 0]])
    one_hot = target_tensor([m], 3)
    assert one_hot.shape == (1, 3, 2, 2) and np.all(one_hot.sum(axis=1) == 1)


# -------------------------------------------------------------------- adam


def adam_oracle(g_seq, cfg):
    m = v = 0.0
    x = 0.0
    for t, g in enumerate(g_seq, start=1):
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        x -= cfg.lr * (m / (1 - cfg.beta1**t)) / (math.sqrt(v / (1 - cfg.beta2**t)) + cfg.eps)
    return x


def test_adam_first_steps_match_closed_form():
    cfg = TrainConfig(lr=0.1)
    p = np.zeros(1)
    state = AdamState.zeros([p])
    adam_step([p], [np.array([2.0])], state, cfg)
    # the first step is lr * sign(g) up to eps
    assert p[0] == pytest.approx(-0.1 * 2.0 / (2.0 + 1e-8), rel=1e-15)
    adam_step([p], [np.array([-1.0])], state, cfg)
    assert p[0] == pytest.approx(adam_oracle([2.0, -1.0], cfg), rel=1e-13)


def test_adam_zero_gradient_leaves_params():
    p = np.arange(3.0)
    state = AdamState.zeros([p])
    for _ in range(3):
        adam_step([p], [np.zeros(3)], state, TrainConfig(lr=1.0))
        adam_step([p], [None], state, TrainConfig(lr=1.0))
    np.testing.assert_array_equal(p, np.arange(3.0))


def test_adam_sign_symmetry():
    a, b = np.zeros(2), np.zeros(2)
    sa, sb = AdamState.zeros([a]), AdamState.zeros([b])
    for g in ([1.0, -3.0], [0.5, 2.0]):
        adam_step([a], [np.array(g)], sa, TrainConfig(lr=0.01))
        adam_step([b], [-np.array(g)], sb, TrainConfig(lr=0.01))
    np.testing.assert_array_equal(a, -b)


def test_adam_aborts_on_non_finite_before_touching_anything():
    p, q = np.ones(2), np.ones(2)
    state = AdamState.zeros([p, q])
    with pytest.raises(NonFiniteGradient, match="w2"):
        adam_step([p, q], [np.ones(2), np.array([1.0, np.inf])], state, TrainConfig(lr=1.0), names=["w1", "w2"])
    assert state.t == 0 and np.all(p == 1) and np.all(state.m[0] == 0)


@pytest.mark.parametrize(
    "kwargs", [dict(lr=-1.0), dict(beta1=1.0), dict(eps=0.0), dict(batch_size=0), dict(main_loss="l2"), dict(val_fraction=1.0)]
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


# ---------------------------------------------------------------- augment


class FixedDraws:
    """Stands in for a Generator: fixed flip draws and rotation count."""

    def __init__(self, h, v, k):
        self.draws = [0.0 if h else 0.9, 0.0 if v else 0.9]
        self.k = k

    def random(self):
        return self.draws.pop(0)

    def integers(self, n):
        return self.k


def sample_with_text(n=8):
    img = np.arange(n * n, dtype=float).reshape(1, 1, n, n) / (n * n)
    lab = np.zeros((n, n), dtype=np.uint8)
    lab[1:3, 2:6] = 1
    return SegSample(Tensor(img), MaskImage(lab), "s")


def test_identity_augmentation():
    s = sample_with_text()
    out = augment(s, FixedDraws(False, False, 0))
    assert np.array_equal(out.image.data, s.image.data) and np.array_equal(out.mask.labels, s.mask.labels)


@pytest.mark.parametrize("h,v,k", [(True, False, 0), (False, True, 0), (False, False, 2)])
def test_involutions(h, v, k):
    s = sample_with_text()
    twice = augment(augment(s, FixedDraws(h, v, k)), FixedDraws(h, v, k))
    assert np.array_equal(twice.image.data, s.image.data)


def test_augmentation_keeps_image_and_mask_aligned(rng):
    s = sample_with_text()
    for _ in range(20):
        out = augment(s, rng)
        # the image value under each foreground pixel is carried along with it
        assert sorted(out.image.data[0, 0][out.mask.labels != 0]) == sorted(s.image.data[0, 0][s.mask.labels != 0])


def test_augmentation_preserves_obj(rng):
    samples = tiny_data(count=6, size=32)
    before = estimate_obj([s.mask for s in samples]).obj
    after = estimate_obj([augment(s, rng).mask for s in samples]).obj
    assert after == pytest.approx(before, rel=1e-12)


def test_augmentation_needs_square():
    s = SegSample(Tensor(np.zeros((1, 1, 4, 6))), MaskImage(np.zeros((4, 6), dtype=int)), "r")
    with pytest.raises(ValueError, match="square"):
        augment(s, np.random.default_rng(0))


# ---------------------------------------------------------------- metrics


def metric_oracle(pred, target):
    pred, target = pred.astype(bool).ravel(), target.astype(bool).ravel()
    tp = sum(p and t for p, t in zip(pred, target))
    fp = sum(p and not t for p, t in zip(pred, target))
    fn = sum(t and not p for p, t in zip(pred, target))
    tn = len(pred) - tp - fp - fn
    r = lambda a, b: 1.0 if b == 0 else a / b
    return dict(
        jaccard=r(tp, tp + fp + fn),
        dice=r(2 * tp, 2 * tp + fp + fn),
        precision=r(tp, tp + fp),
        recall=r(tp, tp + fn),
        specificity=r(tn, tn + fp),
        mean_iu=(r(tp, tp + fp + fn) + r(tn, tn + fp + fn)) / 2,
    )


def test_metrics_match_oracle(rng):
    for _ in range(30):
        pred = rng.random((8, 8)) < rng.random()
        target = rng.random((8, 8)) < rng.random()
        got = mask_metrics(pred, target)
        for name, value in metric_oracle(pred, target).items():
            assert getattr(got, name) == pytest.approx(value, abs=1e-12)


def test_perfect_prediction_scores_one(rng):
    target = rng.random((8, 8)) < 0.4
    assert mask_metrics(target, target).values() == [1.0] * 6


def test_complement_prediction():
    target = np.zeros((4, 4), dtype=bool)
    target[:2] = True
    m = mask_metrics(~target, target)
    assert m.jaccard == 0.0 and m.specificity == 0.0 and m.dice == 0.0


def test_dice_jaccard_identity(rng):
    for _ in range(20):
        m = mask_metrics(rng.random((8, 8)) < 0.5, rng.random((8, 8)) < 0.5)
        assert m.dice == pytest.approx(2 * m.jaccard / (1 + m.jaccard), abs=1e-12)


def test_empty_target_and_prediction_is_perfect():
    m = mask_metrics(np.zeros((3, 3)), np.zeros((3, 3)))
    assert m.values() == [1.0] * 6 and m.f1 == m.dice and m.sensitivity == m.recall


def test_confusion_counts():
    assert confusion(np.array([1, 1, 0, 0]), np.array([1, 0, 1, 0])) == (1, 1, 1, 1)


def test_evaluate_crops_padding():
    g = tiny_graph()
    s = tiny_data(count=1)[0]
    pred = training.predict_foreground(g, s.image.data)[0]
    # mask = prediction inside the valid window, garbage outside it
    lab = pred.astype(np.uint8)
    lab[12:, :] = 1 - lab[12:, :]
    sample = SegSample(s.image, MaskImage(lab), "p", valid_size=(12, 16))
    assert evaluate(g, [sample]).values() == [1.0] * 6


# ------------------------------------------------------------------ config


def test_parse_config_document():
    spec, cfg, ads = parse_config(TINY + "lr 0.001\nepochs 3\nmain_loss dice\naugment off\nads case2:2\n")
    assert spec == parse_spec(TINY)
    assert (cfg.lr, cfg.epochs, cfg.main_loss, cfg.augment, ads) == (0.001, 3, "dice", False, "case2:2")


def test_parse_config_base_and_no_spec():
    spec, cfg, ads = parse_config("seed 7\n", TrainConfig(epochs=2))
    assert spec is None and ads is None and (cfg.seed, cfg.epochs) == (7, 2)


@pytest.mark.parametrize("text", ["speed 3\n", "lr\n", "epochs x\n", "lr 1\nlr 2\n", "ads sometimes\n", "augment maybe\n"])
def test_parse_config_errors(text):
    with pytest.raises(SpecSyntaxError):
        parse_config(text)


# --------------------------------------------------------------- training


def test_split_is_disjoint_and_seeded():
    data = tiny_data(count=10)
    tr, va = split_dataset(data, 0.2, 0)
    assert len(va) == 2 and {s.id for s in tr}.isdisjoint(s.id for s in va)
    assert [s.id for s in split_dataset(data, 0.2, 0)[1]] == [s.id for s in va]


def test_zero_learning_rate_keeps_params_bit_identical():
    g = tiny_graph()
    before = {n: p.data.copy() for n, p in g.named_parameters()}
    train(g, tiny_data(), TrainConfig(lr=0.0, epochs=2, batch_size=2))
    assert all(before[n].tobytes() == p.data.tobytes() for n, p in g.named_parameters())


def test_single_sample_overfits():
    data = tiny_data(count=1)
    g = tiny_graph()
    cfg = TrainConfig(lr=1e-2, epochs=200, batch_size=1, main_loss="dice", augment=False, weight_decay=0.0)
    res = train(g, data, cfg, val=data)
    losses = [h["train_loss"] for h in res.history]
    assert losses[-1] < 0.05 and losses[-1] < losses[0]
    assert res.history[-1]["val_dice"] > 0.95


def test_first_epoch_is_deterministic():
    data = tiny_data(count=6)
    cfg = TrainConfig(lr=1e-3, epochs=1, batch_size=2)
    a = train(tiny_graph(), data, cfg).history[0]["train_loss"]
    b = train(tiny_graph(), data, cfg).history[0]["train_loss"]
    assert a == b


def test_training_with_aux_branch_runs():
    g = tiny_graph()
    attach_aux_branch(g, placement_from_directive(g, 2, 1))
    res = train(g, tiny_data(), TrainConfig(lr=1e-3, epochs=2, batch_size=2), ads="case2:1")
    assert len(res.history) == 2 and all(math.isfinite(h["train_loss"]) for h in res.history)


def test_log_and_checkpoint_files(tmp_path):
    g = tiny_graph()
    log, ckpt = tmp_path / "log.csv", tmp_path / "c.ddnk"
    res = train(g, tiny_data(count=5), TrainConfig(lr=1e-3, epochs=3, batch_size=2), log_path=str(log), checkpoint_path=str(ckpt))
    lines = log.read_text().splitlines()
    assert lines[0] == ",".join(LOG_HEADER) and len(lines) == 4
    assert log.read_text() == res.log_csv()
    restored, _ = load_checkpoint(str(ckpt))
    best = res.best_state
    assert all(np.array_equal(best[k], v) for k, v in restored.state_dict().items())
    assert res.best_dice == max(h["val_dice"] for h in res.history)


def test_divergence_restores_last_good_epoch(tmp_path, monkeypatch):
    data = tiny_data(count=2)
    cfg = TrainConfig(lr=1e-3, epochs=3, batch_size=2, val_fraction=0.0)
    reference = tiny_graph()
    train(reference, data, TrainConfig(lr=1e-3, epochs=1, batch_size=2, val_fraction=0.0))

    calls = {"n": 0}
    real = training.LOSS_FUNCTIONS["ce"]

    def flaky(p, t):
        calls["n"] += 1
        out = real(p, t)
        if calls["n"] == 2:       # first step of epoch 2
            out.data[...] = np.nan
        return out

    monkeypatch.setitem(training.LOSS_FUNCTIONS, "ce", flaky)
    g = tiny_graph()
    path = tmp_path / "c.ddnk"
    with pytest.raises(TrainingDiverged) as exc:
        train(g, data, cfg, checkpoint_path=str(path))
    assert exc.value.epoch == 2 and exc.value.checkpoint_path == str(path)
    ref = reference.state_dict()
    assert all(np.array_equal(ref[k], v) for k, v in g.state_dict().items())
    saved, _ = load_checkpoint(str(path))
    assert all(np.array_equal(ref[k], v) for k, v in saved.state_dict().items())


# ------------------------------------------------------------- checkpoint


@pytest.mark.parametrize("ads", ["off", "case1:1", "case2:2"])
def test_checkpoint_round_trip(ads, rng):
    g = tiny_graph(3)
    if ads != "off":
        attach_aux_branch(g, placement_from_directive(g, *parse_directive(ads)), rng)
    g.forward(Tensor(rng.random((2, 1, 16, 16))), "train", rng)   # move the running stats
    back, back_ads = graph_from_checkpoint(encode_checkpoint(g, ads))
    assert back_ads == ads and back.spec == g.spec
    x = Tensor(rng.random((1, 1, 16, 16)))
    a, oa = g.forward(x)
    b, ob = back.forward(x)
    assert a.data.tobytes() == b.data.tobytes()
    if ads != "off":
        assert oa["aux"].data.tobytes() == ob["aux"].data.tobytes()


def test_checkpoint_layout():
    g = tiny_graph()
    data = encode_checkpoint(g)
    assert data[:5] == b"DDNK1"
    text, arrays = decode_checkpoint(data)
    assert text.endswith("ads off\n") and set(arrays) == set(g.state_dict())


@pytest.mark.parametrize("mutate", [lambda d: b"XXXX1" + d[5:], lambda d: d[:-4], lambda d: d + b"\0"])
def test_checkpoint_corruption(mutate):
    with pytest.raises(CheckpointError):
        graph_from_checkpoint(mutate(encode_checkpoint(tiny_graph())))


def test_checkpoint_file_round_trip(tmp_path):
    g = tiny_graph()
    save_checkpoint(str(tmp_path / "c.ddnk"), g, "off")
    back, ads = load_checkpoint(str(tmp_path / "c.ddnk"))
    assert ads == "off"
    assert all(np.array_equal(v, back.state_dict()[k]) for k, v in g.state_dict().items())


def test_metric_names_match_log():
    assert [f"val_{n}" for n in ("jac", "dice", "precision", "recall", "specificity", "meaniu")] == list(LOG_HEADER[2:])
    assert len(MetricsRecord.NAMES) == 6
