import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from bgforecast import nn
from bgforecast.datamodel import NumericError, ShapeError, ValidationError
from gradcheck import check_model

SMALL = nn.ModelConfig(n_features=4, seq_len=8, out_dim=6, bi_hidden=8, uni_hidden=16, fc_dim=8)


def _zero_cell(hidden=3, inp=2):
    z = lambda *s: np.zeros(s)  # noqa: E731
    return nn.GruCellParams(z(hidden, inp), z(hidden, inp), z(hidden, inp),
                            z(hidden, hidden), z(hidden, hidden), z(hidden, hidden),
                            z(hidden), z(hidden), z(hidden))


def test_gru_cell_zero_params():
    p = _zero_cell()
    v = np.array([0.4, -1.0, 2.0])
    assert_array_equal(nn.gru_cell_step(p, np.ones(2), v), 0.5 * v)
    assert_array_equal(nn.gru_cell_step(p, np.ones(2), np.zeros(3)), 0.0)


def test_gru_cell_shape_error():
    with pytest.raises(ShapeError):
        nn.gru_cell_step(_zero_cell(), np.ones(5), np.zeros(3))


def test_gru_cell_bounded():
    rng = np.random.default_rng(0)
    params = nn.init_params(SMALL, 1).cell("gru")
    scaled = nn.GruCellParams(*(5 * getattr(params, f) for f in nn.GruCellParams.__dataclass_fields__))
    for _ in range(50):
        h_prev = rng.uniform(-0.999, 0.999, 16)
        assert np.all(np.abs(nn.gru_cell_step(params, rng.normal(0, 1, 16), h_prev)) < 1)
        # large pre-activations saturate tanh to exactly 1.0 in floating point
        assert np.all(np.abs(nn.gru_cell_step(scaled, rng.normal(0, 5, 16), h_prev)) <= 1)


def test_sequence_forward_matches_cell_loop():
    params = nn.init_params(SMALL, 2)
    cell = params.cell("bigru_fwd")
    X = np.random.default_rng(1).random((8, 3, 4))
    H, _ = nn._gru_seq_forward(cell, X, "x")
    h = np.zeros((3, 8))
    for t in range(8):
        h = nn.gru_cell_step(cell, X[t], h)
        assert_allclose(H[t], h, rtol=1e-13, atol=1e-15)


def test_config_shapes_paper_size():
    cfg = nn.ModelConfig()
    s = cfg.shapes()
    assert s["bigru_fwd.W_z"] == (128, 4) and s["gru.W_z"] == (256, 256)
    assert s["fc1.W"] == (64, 256) and s["head.W"] == (6, 12 * 64)
    assert nn.ModelConfig(pooling="global").head_in == 64
    with pytest.raises(ValidationError):
        nn.ModelConfig(task="ranking")


def test_zero_input_zero_output():
    params = nn.init_params(SMALL, 0)
    out, _ = nn.forward(params, np.zeros((1, 8, 4)), "eval")
    assert_array_equal(out, 0.0)


def test_eval_and_seeded_train_determinism():
    params = nn.init_params(SMALL, 0)
    x = np.random.default_rng(0).random((3, 8, 4))
    assert_array_equal(nn.forward(params, x, "eval")[0], nn.forward(params, x, "eval")[0])
    a = nn.forward(params, x, "train", 5)[0]
    assert_array_equal(a, nn.forward(params, x, "train", 5)[0])
    assert not np.array_equal(a, nn.forward(params, x, "train", 6)[0])


def test_forward_shape_errors():
    params = nn.init_params(SMALL, 0)
    with pytest.raises(ShapeError):
        nn.forward(params, np.zeros((1, 7, 4)))
    with pytest.raises(ValidationError):
        nn.forward(params, np.zeros((1, 8, 4)), "test")


@pytest.mark.filterwarnings("ignore:invalid value")
def test_non_finite_activation_names_layer():
    params = nn.init_params(SMALL, 0)
    params.tensors["head.W"][0, 0] = np.inf
    with pytest.raises(NumericError) as info:
        nn.forward(params, np.ones((1, 8, 4)))
    assert info.value.layer == "head"


def test_zero_output_grad_zero_gradients():
    params = nn.init_params(SMALL, 0)
    _, cache = nn.forward(params, np.random.default_rng(0).random((2, 8, 4)), "train", 1)
    grads = nn.backward(params, cache, np.zeros((2, 6)))
    for _, g in grads:
        assert_array_equal(g, 0.0)


def test_backward_config_mismatch():
    params = nn.init_params(SMALL, 0)
    _, cache = nn.forward(params, np.zeros((1, 8, 4)))
    other = nn.init_params(nn.ModelConfig(n_features=4, seq_len=8, bi_hidden=8, uni_hidden=16, fc_dim=4), 0)
    with pytest.raises(ShapeError):
        nn.backward(other, cache, np.zeros((1, 6)))
    with pytest.raises(ShapeError):
        nn.backward(params, cache, np.zeros((2, 6)))


@pytest.mark.parametrize("mode,pooling,task", [
    ("eval", "avg2", "regression"),
    ("train", "global", "classification"),
])
def test_gradient_check_small(mode, pooling, task):
    cfg = nn.ModelConfig(n_features=2, seq_len=5, out_dim=3, task=task, bi_hidden=3,
                         uni_hidden=4, fc_dim=3, pooling=pooling)
    errs = check_model(cfg, seed=4, mode=mode)
    assert max(errs.values()) < 1e-6, errs


def test_backward_direction_symmetry():
    """Reversing the input and swapping the two Bi-GRU cells swaps their gradients."""
    cfg = nn.ModelConfig(n_features=3, seq_len=6, out_dim=2, bi_hidden=4, uni_hidden=5,
                         fc_dim=3, pooling="global", dropout=0.0)
    base = nn.init_params(cfg, 3)
    rng = np.random.default_rng(3)
    x = rng.random((2, 6, 3))
    w = rng.normal(size=(2, 2))

    def bigru_grads(params, batch):
        # gradient of a loss on the Bi-GRU output sum over time, symmetric in time order
        X = batch.transpose(1, 0, 2)
        Hf, cf = nn._gru_seq_forward(params.cell("bigru_fwd"), X, "f")
        Hb, cb = nn._gru_seq_forward(params.cell("bigru_bwd"), X[::-1], "b")
        dHf = np.broadcast_to(w[:, :1], (6, 2, 4)) * np.ones_like(Hf)
        dHb = np.broadcast_to(w[:, 1:], (6, 2, 4)) * np.ones_like(Hb)
        gf, _ = nn._gru_seq_backward(params.cell("bigru_fwd"), cf, dHf)
        gb, _ = nn._gru_seq_backward(params.cell("bigru_bwd"), cb, dHb)
        return gf, gb

    swapped = base.copy()
    for k in list(swapped.tensors):
        if k.startswith("bigru_fwd."):
            rest = k.split(".", 1)[1]
            swapped.tensors[k] = base[f"bigru_bwd.{rest}"].copy()
            swapped.tensors[f"bigru_bwd.{rest}"] = base[k].copy()
    gf, gb = bigru_grads(base, x)
    w = w[:, ::-1]
    sf, sb = bigru_grads(swapped, x[:, ::-1])
    for k in gf:
        assert_allclose(sb[k], gf[k], rtol=1e-12, atol=1e-14)
        assert_allclose(sf[k], gb[k], rtol=1e-12, atol=1e-14)


def test_causality_probes():
    cfg = nn.ModelConfig(n_features=2, seq_len=6, out_dim=2, bi_hidden=3, uni_hidden=4, fc_dim=2)
    params = nn.init_params(cfg, 0)
    x = np.random.default_rng(0).random((6, 1, 2))
    bumped = x.copy()
    bumped[4] += 1.0
    Hf0, _ = nn._gru_seq_forward(params.cell("bigru_fwd"), x, "f")
    Hf1, _ = nn._gru_seq_forward(params.cell("bigru_fwd"), bumped, "f")
    assert_array_equal(Hf0[:4], Hf1[:4])
    assert not np.allclose(Hf0[4:], Hf1[4:])
    Hb0, _ = nn._gru_seq_forward(params.cell("bigru_bwd"), x[::-1], "b")
    Hb1, _ = nn._gru_seq_forward(params.cell("bigru_bwd"), bumped[::-1], "b")
    # reversed pass re-indexed to time order: steps <= 4 see the bump
    assert not np.allclose(Hb0[::-1][0], Hb1[::-1][0])


def test_dropout_preserves_expectation():
    cfg = nn.ModelConfig(n_features=2, seq_len=4, out_dim=1, bi_hidden=3, uni_hidden=8, fc_dim=2)
    params = nn.init_params(cfg, 0)
    x = np.random.default_rng(2).random((1, 4, 2))
    _, eval_cache = nn.forward(params, x, "eval")
    ref = eval_cache["D1"]
    acc = np.zeros_like(ref)
    n = 10_000
    for s in range(n):
        acc += nn.forward(params, x, "train", s)[1]["D1"]
    assert abs(acc.mean() / n - ref.mean()) < 0.02 * abs(ref.mean())


def test_predict_batches_match_single_pass():
    params = nn.init_params(SMALL, 0)
    x = np.random.default_rng(0).random((10, 8, 4))
    assert_allclose(nn.predict(params, x, batch_size=3), nn.forward(params, x)[0], rtol=1e-13)
    assert nn.predict(params, x[:0]).shape == (0, 6)


def test_init_uniform_bounds_and_zero_bias():
    params = nn.init_params(nn.ModelConfig(), 0)
    assert np.abs(params["gru.U_h"]).max() <= 1 / 16
    assert_array_equal(params["fc1.b"], 0.0)
    assert params.equal(nn.init_params(nn.ModelConfig(), 0))


def test_checkpoint_roundtrip_exact(tmp_path):
    params = nn.init_params(SMALL, 9)
    path = nn.save_checkpoint(params, tmp_path / "m.json", {"note": "x"})
    loaded, extra = nn.load_checkpoint(path)
    assert loaded.equal(params) and extra == {"note": "x"}
    d = nn.checkpoint_dict(params)
    d["version"] = 99
    with pytest.raises(ValidationError):
        nn.params_from_dict(d)


def test_params_shape_validation():
    params = nn.init_params(SMALL, 0)
    bad = dict(params.tensors)
    bad["fc1.b"] = np.zeros(3)
    with pytest.raises(ShapeError):
        nn.ModelParams(SMALL, bad)
    assert params.n_params == sum(int(np.prod(s)) for s in SMALL.shapes().values())
