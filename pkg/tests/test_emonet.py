import numpy as np
import pytest

from alstm import diffcore as dc
from alstm.cells import CellKind, StepSet
from alstm.diffcore import Tensor
from alstm.emonet import (EMOTIONS, GENDERS, ModelConfig, TaskHead, build, forward, forward_batch,
                          load_checkpoint, multitask_loss, full_config, parameter_count,
                          parameter_count_formula, save_checkpoint)
from alstm.errors import ConfigurationError, DataError, DimensionError, FormatError
from alstm.gradsuite import MODEL_TOLERANCE, model_check, tiny_config
from alstm.trainer import AdamState, adam_step

# 36*256+256 + 2*4*(128*384+128) + 256 + (65536+256+1024+4) + (65536+256+2048+8) + (65536+256+512+2)
FULL_CONVENTIONAL = 604_942
FULL_ADVANCED = 605_198

KINDS = [CellKind.conventional(), CellKind.mean(StepSet((3, 2, 1))), CellKind.advanced(StepSet((3, 2, 1)))]


def small_config(cell, dropout=0.0):
    heads = (TaskHead("emotion", EMOTIONS, 16, 1.0), TaskHead("speaker", ("a", "b", "c"), 16, 0.3),
             TaskHead("gender", GENDERS, 16, 0.6))
    return ModelConfig(36, 16, 8, cell, heads, dropout)


def test_full_size_parameter_counts():
    adv = build(full_config(CellKind.advanced(StepSet((5, 3, 1)))), 0)
    conv = build(full_config(CellKind.conventional()), 0)
    assert parameter_count(adv) == FULL_ADVANCED
    assert parameter_count(conv) == FULL_CONVENTIONAL
    assert parameter_count(adv) - parameter_count(conv) == 256
    assert 5.7e5 <= parameter_count(adv) <= 6.4e5


def test_mean_cell_adds_no_parameters():
    mean = build(full_config(CellKind.mean(StepSet((5, 3, 1)))), 0)
    assert parameter_count(mean) == FULL_CONVENTIONAL


@pytest.mark.parametrize("cell", KINDS)
def test_formula_matches_built_model(cell):
    cfg = small_config(cell)
    assert parameter_count(build(cfg, 3)) == parameter_count_formula(cfg)


def test_zero_head_count():
    cfg = ModelConfig(5, 7, 4, CellKind.conventional(), ())
    # dense 5*7+7, two directions of 4 gates x (4*(4+7) + 4), pooling 8
    assert parameter_count_formula(cfg) == 42 + 2 * 4 * 48 + 8
    assert parameter_count(build(cfg, 0)) == parameter_count_formula(cfg)


def test_build_is_deterministic():
    cfg = small_config(KINDS[2])
    a, b = build(cfg, 11), build(cfg, 11)
    for (na, ta), (nb, tb) in zip(a.named_parameters().items(), b.named_parameters().items()):
        assert na == nb and np.array_equal(ta.data, tb.data)
    c = build(cfg, 12)
    assert not np.array_equal(a.dense_W.data, c.dense_W.data)


def test_initialization_independent_of_cell_kind():
    a = build(small_config(KINDS[0]), 5).named_parameters()
    b = build(small_config(KINDS[2]), 5).named_parameters()
    for name, t in a.items():
        assert np.array_equal(t.data, b[name].data)
    assert not build(small_config(KINDS[2]), 5).comb_fwd.W.data.any()


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(dense=0)
    with pytest.raises(ConfigurationError):
        ModelConfig(heads=(TaskHead("gender", GENDERS),))
    with pytest.raises(ConfigurationError):
        ModelConfig(heads=(TaskHead("emotion", EMOTIONS, weight=-1.0),))
    with pytest.raises(ConfigurationError):
        ModelConfig(dropout=1.0)


def test_config_round_trip():
    cfg = full_config()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("cell", KINDS)
def test_forward_contract(cell):
    model = build(small_config(cell, dropout=0.5), 0)
    feats = np.random.default_rng(0).normal(size=(9, 36))
    out = forward(model, feats)
    for head in model.config.heads:
        p = out.probs[head.name].data
        assert p.shape == (head.classes,)
        assert abs(p.sum() - 1) <= 1e-9
    again = forward(model, feats)
    for k in out.probs:
        assert np.array_equal(out.probs[k].data, again.probs[k].data)
    assert abs(out.attention.data.sum() - 1) <= 1e-12


def test_single_frame_utterance():
    model = build(small_config(KINDS[2]), 0)
    out = forward(model, np.ones((1, 36)))
    assert out.attention.data.tolist() == [1.0]


def test_forward_rejects_bad_input():
    model = build(small_config(KINDS[0]), 0)
    with pytest.raises(DimensionError):
        forward(model, np.zeros((4, 35)))
    with pytest.raises(DataError):
        forward(model, np.zeros((0, 36)))


def test_dropout_only_in_training():
    model = build(small_config(KINDS[2], dropout=0.5), 0)
    feats = np.random.default_rng(1).normal(size=(6, 36))
    a = forward(model, feats, training=True, rng=np.random.default_rng(0)).probs["emotion"].data
    b = forward(model, feats, training=False).probs["emotion"].data
    assert not np.array_equal(a, b)


@pytest.mark.parametrize("cell", KINDS)
def test_batch_matches_single_and_ignores_padding(cell):
    model = build(small_config(cell), 2)
    rng = np.random.default_rng(3)
    lengths = [7, 4, 11]
    x = rng.normal(size=(3, 11, 36))
    noisy = x.copy()
    for b, n in enumerate(lengths):
        noisy[b, n:] = rng.normal(size=(11 - n, 36)) * 100
    out = forward_batch(model, Tensor(x), lengths)
    out2 = forward_batch(model, Tensor(noisy), lengths)
    for k in out.probs:
        assert np.array_equal(out.probs[k].data, out2.probs[k].data)
    for b, n in enumerate(lengths):
        single = forward(model, x[b, :n])
        assert np.allclose(out.probs["emotion"].data[b], single.probs["emotion"].data, rtol=0, atol=1e-12)
        assert (out.attention.data[b, n:] == 0).all()


def test_multitask_loss_arithmetic():
    e = np.exp(-1.0)
    probs = {"emotion": Tensor([e, 1 - e]), "speaker": Tensor([np.exp(-2.0), 1 - np.exp(-2.0)]),
             "gender": Tensor([1 - np.exp(-0.5), np.exp(-0.5)])}
    labels = {"emotion": 0, "speaker": 0, "gender": 1}
    loss = multitask_loss(probs, labels, {"emotion": 1.0, "speaker": 0.3, "gender": 0.6})
    assert loss.item() == pytest.approx(1.9, abs=1e-12)
    only = multitask_loss(probs, {"emotion": 0}, {"emotion": 1.0, "speaker": 0.0, "gender": 0.0})
    assert only.item() == pytest.approx(1.0, abs=1e-12)


def test_multitask_loss_perfect_and_missing():
    probs = {"emotion": Tensor([0.0, 1.0]), "gender": Tensor([1.0, 0.0])}
    assert multitask_loss(probs, {"emotion": 1, "gender": 0}, {"emotion": 1.0, "gender": 0.6}).item() == 0.0
    with pytest.raises(DataError):
        multitask_loss(probs, {"emotion": 1}, {"emotion": 1.0, "gender": 0.6})
    with pytest.raises(DataError):
        multitask_loss(probs, {"emotion": 1, "gender": -1}, {"emotion": 1.0, "gender": 0.6})


@pytest.mark.parametrize("cell", KINDS)
def test_end_to_end_gradient_check(cell):
    assert model_check(0, cell=cell).max_rel_err < MODEL_TOLERANCE


def test_tiny_config_shape():
    cfg = tiny_config()
    assert (cfg.input_dim, cfg.dense, cfg.hidden) == (5, 7, 4)
    assert [h.classes for h in cfg.heads] == [2, 2, 2]
    assert cfg.cell.steps.offsets == (3, 2, 1)


@pytest.mark.parametrize("cell", KINDS)
def test_overfits_single_batch(cell):
    model = build(small_config(cell), 0)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 10, 36))
    lengths = np.array([10, 9, 8, 7, 10, 6, 5, 10])
    labels = {"emotion": np.arange(8) % 4, "speaker": np.arange(8) % 3, "gender": np.arange(8) % 2}
    weights = {"emotion": 1.0, "speaker": 0.3, "gender": 0.6}
    params = model.parameters()
    state = AdamState.zeros_like(params)
    losses = []
    for _ in range(50):
        model.zero_grad()
        with dc.Tape() as tape:
            loss = multitask_loss(forward_batch(model, Tensor(x), lengths).probs, labels, weights)
        tape.backward(loss)
        adam_step(params, [p.grad for p in params], state, lr=0.03)
        losses.append(loss.item())
    assert losses[-1] < 0.01 < losses[0]


def test_checkpoint_round_trip(tmp_path):
    model = build(small_config(KINDS[2]), 4)
    model.comb_fwd.W.data = np.random.default_rng(0).normal(size=8)
    path = tmp_path / "m.alsm"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.config == model.config
    for name, t in model.named_parameters().items():
        assert np.array_equal(t.data, loaded.named_parameters()[name].data)
    save_checkpoint(loaded, tmp_path / "again.alsm")
    assert path.read_bytes() == (tmp_path / "again.alsm").read_bytes()
    assert path.read_bytes()[:4] == b"ALSM"


def test_checkpoint_corruption(tmp_path):
    path = tmp_path / "m.alsm"
    save_checkpoint(build(small_config(KINDS[0]), 0), path)
    raw = path.read_bytes()
    (tmp_path / "trunc.alsm").write_bytes(raw[:-5])
    (tmp_path / "magic.alsm").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "extra.alsm").write_bytes(raw + b"\0")
    for name in ("trunc", "magic", "extra"):
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / f"{name}.alsm")
