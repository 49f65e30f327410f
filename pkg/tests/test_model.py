import math

import numpy as np
import pytest

from conftest import gradcheck
from hdcam import tensor as T
from hdcam.errors import ConfigError, ShapeError
from hdcam.model import (
    PUBLISHED_PARAMS,
    HdcamModel,
    LedgerToggles,
    ModelConfig,
    count_parameters,
    hdconv_encoder,
    hierarchical_dwconv,
    mha,
    mhsatten_encoder,
    named_variant,
    reconcile,
    validate_config,
)
from hdcam.model.ablation import TABLE5, table4_grid, table5_grid, table6_grid

VARIANT_NAMES = ("XXSmall", "XSmall", "Small")


def random_config(rng):
    """Channel/branch combinations that respect the 8-per-branch and max-4 rules."""
    s = int(rng.integers(1, 5))
    per = int(rng.choice([8, 16]))
    return s, s * per


# literal oracles -------------------------------------------------------------

def hier_dwconv_oracle(x, s, ws, bs):
    """y_1 = DW(x_1); y_i = DW(x_i + y_{i-1}) with zero padding 1, element by element."""
    L, C = x.shape
    w_ = C // s
    ys = []
    prev = None
    for i in range(s):
        xi = x[:, i * w_:(i + 1) * w_]
        z = xi if prev is None else xi + prev
        y = np.zeros_like(z)
        for t in range(L):
            for c in range(w_):
                acc = bs[i][c]
                for k in range(3):
                    tt = t + k - 1
                    if 0 <= tt < L:
                        acc += ws[i][k, 0, c] * z[tt, c]
                y[t, c] = acc
        ys.append(y)
        prev = y
    return np.concatenate(ys, axis=1)


def mha_oracle(x, h, p):
    """Per position, per head: explicit exp-normalised weights over all keys."""
    L, C = x.shape
    d = C // h
    q = x @ p["q.weight"] + p["q.bias"]
    k = x @ p["k.weight"] + p["k.bias"]
    v = x @ p["v.weight"] + p["v.bias"]
    heads = np.zeros((L, C))
    for j in range(h):
        sl = slice(j * d, (j + 1) * d)
        for t in range(L):
            scores = [sum(q[t, sl][a] * k[u, sl][a] for a in range(d)) / math.sqrt(d) for u in range(L)]
            m = max(scores)
            e = [math.exp(sc - m) for sc in scores]
            z = sum(e)
            for u in range(L):
                heads[t, sl] += e[u] / z * v[u, sl]
    return heads @ p["proj.weight"] + p["proj.bias"]


def attn_params(rng, C, dtype=np.float64):
    p = {}
    for n in ("q", "k", "v", "proj"):
        p[f"{n}.weight"] = rng.standard_normal((C, C)).astype(dtype) / math.sqrt(C)
        p[f"{n}.bias"] = rng.standard_normal(C).astype(dtype) * 0.1
    return p


@pytest.mark.parametrize("dtype,atol,rtol", [(np.float64, 1e-10, 0), (np.float32, 0, 1e-4)])
def test_hierarchical_dwconv_oracle(dtype, atol, rtol):
    rng = np.random.default_rng(0)
    for _ in range(50):
        s, C = random_config(rng)
        L = int(rng.integers(3, 12))
        x = rng.standard_normal((L, C))
        ws = [rng.standard_normal((3, 1, C // s)) for _ in range(s)]
        bs = [rng.standard_normal(C // s) for _ in range(s)]
        ref = hier_dwconv_oracle(x, s, ws, bs)
        got = hierarchical_dwconv(T.Tensor(x[None].astype(dtype)), s,
                                  [T.Tensor(w.astype(dtype)) for w in ws],
                                  [T.Tensor(b.astype(dtype)) for b in bs]).data[0]
        if dtype == np.float64:
            np.testing.assert_allclose(got, ref, atol=atol, rtol=0)
        else:
            assert np.max(np.abs(got - ref)) / np.max(np.abs(ref)) < rtol


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_mha_oracle(dtype):
    rng = np.random.default_rng(1)
    for _ in range(50):
        h, C = random_config(rng)
        L = int(rng.integers(2, 8))
        x = rng.standard_normal((L, C))
        p = attn_params(rng, C)
        ref = mha_oracle(x, h, p)
        got = mha(T.Tensor(x[None].astype(dtype)), h, {k: T.Tensor(v.astype(dtype)) for k, v in p.items()}).data[0]
        if dtype == np.float64:
            np.testing.assert_allclose(got, ref, atol=1e-10, rtol=0)
        else:
            assert np.max(np.abs(got - ref)) / np.max(np.abs(ref)) < 1e-4


def test_mha_weights_rows_sum_to_one():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 5, 16))
    _, w = mha(T.Tensor(x), 2, {k: T.Tensor(v) for k, v in attn_params(rng, 16).items()}, return_weights=True)
    assert w.shape == (2, 2, 5, 5)
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-12)


def test_hierarchical_s1_is_plain_depthwise():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 6, 8))
    w, b = rng.standard_normal((3, 1, 8)), rng.standard_normal(8)
    a = hierarchical_dwconv(T.Tensor(x), 1, [T.Tensor(w)], [T.Tensor(b)]).data
    c = T.conv1d(T.Tensor(x), T.Tensor(w), T.Tensor(b), padding=1, groups=8).data
    np.testing.assert_array_equal(a, c)


# encoder gradients -----------------------------------------------------------

def hdconv_params(rng, C, s):
    p = {}
    for i in range(s):
        p[f"dw.{i}.weight"] = rng.standard_normal((3, 1, C // s)) * 0.5
        p[f"dw.{i}.bias"] = rng.standard_normal(C // s) * 0.1
    p["norm.weight"] = 1 + 0.1 * rng.standard_normal(C)
    p["norm.bias"] = 0.1 * rng.standard_normal(C)
    p["pw.weight"] = rng.standard_normal((C, C)) / math.sqrt(C)
    p["pw.bias"] = 0.1 * rng.standard_normal(C)
    p["gamma"] = 1 + 0.1 * rng.standard_normal(C)
    return p


def mhsatten_params(rng, C):
    p = {"attn." + k: v for k, v in attn_params(rng, C).items()}
    for n in ("norm1", "norm2"):
        p[f"{n}.weight"] = 1 + 0.1 * rng.standard_normal(C)
        p[f"{n}.bias"] = 0.1 * rng.standard_normal(C)
    p["pw.weight"] = rng.standard_normal((C, C)) / math.sqrt(C)
    p["pw.bias"] = 0.1 * rng.standard_normal(C)
    p["gamma"] = 1 + 0.1 * rng.standard_normal(C)
    p["gamma_attn"] = 1 + 0.1 * rng.standard_normal(C)
    return p


def _encoder_gradcheck(encoder, params, x, seed, **kw):
    names = list(params)

    def fn(xx, *ps):
        return encoder(xx, dict(zip(names, ps)), **kw)

    return gradcheck(fn, [x] + [params[n] for n in names], seed)


@pytest.mark.parametrize("seed", range(20))
def test_hdconv_encoder_gradients(seed):
    rng = np.random.default_rng(seed)
    s = 2 if seed % 2 else 1
    x = rng.standard_normal((1, 5, 16))
    assert _encoder_gradcheck(hdconv_encoder, hdconv_params(rng, 16, s), x, seed, s=s) < 1e-4


@pytest.mark.parametrize("seed", range(20))
def test_mhsatten_encoder_gradients(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 4, 16))
    assert _encoder_gradcheck(mhsatten_encoder, mhsatten_params(rng, 16), x, seed, h=2) < 1e-4


def test_whole_model_gradient_small():
    cfg = named_variant("XXSmall", window_ms=150, num_classes=4)
    m = HdcamModel(cfg, seed=0, dtype=np.float64)
    rng = np.random.default_rng(0)
    x = T.Tensor(rng.standard_normal((2, 300, 12)))
    loss = T.cross_entropy(m(x), [1, 3])
    T.backward(loss)
    name = "stages.3.blocks.4.attn.q.weight"
    p = m.params[name]
    idx = (1, 2)
    old = p.data[idx]
    vals = []
    for d in (1e-5, -1e-5):
        p.data[idx] = old + d
        with T.no_grad():
            vals.append(T.cross_entropy(m(x), [1, 3]).item())
    p.data[idx] = old
    num = (vals[0] - vals[1]) / 2e-5
    assert abs(p.grad[idx] - num) <= 1e-4 * max(abs(num), 1e-6)


# shapes and counts -----------------------------------------------------------

@pytest.mark.parametrize("name", VARIANT_NAMES)
@pytest.mark.parametrize("W,expected", [(150, (30, 15, 7)), (200, (40, 20, 10)),
                                        (250, (50, 25, 12)), (300, (60, 30, 15))])
def test_stage_lengths(name, W, expected):
    m = HdcamModel(named_variant(name, window_ms=W), init="zeros")
    assert m.stage_lengths() == expected


def test_forward_shapes_single_and_batch():
    m = HdcamModel(named_variant("XXSmall", window_ms=150))
    assert m(np.zeros((300, 12), dtype=np.float32)).shape == (17,)
    assert m(np.zeros((3, 300, 12), dtype=np.float32)).shape == (3, 17)
    with pytest.raises(ShapeError, match="L=300"):
        m(np.zeros((1, 400, 12), dtype=np.float32))


@pytest.mark.parametrize("name", VARIANT_NAMES)
def test_published_counts_exact(name):
    assert count_parameters(HdcamModel(named_variant(name), init="zeros")).total == PUBLISHED_PARAMS[name]


def test_table5_counts_exact():
    for row in table5_grid():
        n = count_parameters(HdcamModel(row.config, init="zeros")).total
        assert n == TABLE5[int(row.id)][2], row.id


def test_count_independent_of_window():
    counts = {count_parameters(HdcamModel(named_variant("Small", window_ms=w), init="zeros")).total
              for w in (150, 200, 250, 300)}
    assert len(counts) == 1


def test_placement_and_hierarchy_do_not_change_counts():
    for grid in (table4_grid(), table6_grid()):
        for row in grid:
            base = named_variant(row.id.split("-")[0])
            assert count_parameters(HdcamModel(row.config, init="zeros")).total == \
                count_parameters(HdcamModel(base, init="zeros")).total


def test_reconcile_best_is_default_toggles():
    best = reconcile()[0]
    assert best.total_abs_deviation == 0
    assert best.toggles == LedgerToggles()


def test_toggles_change_counts():
    small = named_variant("Small")
    base = count_parameters(HdcamModel(small, init="zeros")).total
    no_bias = small.replace(toggles=LedgerToggles(bias=False))
    assert count_parameters(HdcamModel(no_bias, init="zeros")).total < base


def test_stage_begin_puts_attention_first():
    m = HdcamModel(named_variant("Small", mhsatten_position="stage_begin"), init="zeros")
    kinds = [b.kind for b in m.program if b.stage == 2]
    assert kinds[:2] == ["down", "mhsatten"]
    m = HdcamModel(named_variant("Small"), init="zeros")
    assert [b.kind for b in m.program if b.stage == 2][-1] == "mhsatten"


# config validation -------------------------------------------------------------

def test_validation_messages():
    bad = named_variant("XXSmall", heads=(2, 8, 4))
    msgs = " ".join(validate_config(bad))
    assert "at most four" in msgs and "24/8 = 3 < 8" in msgs
    assert validate_config(named_variant("Small")) == []
    with pytest.raises(ConfigError, match="valid names"):
        named_variant("Tiny")


def test_config_dict_roundtrip_and_strict_keys():
    cfg = named_variant("XSmall", window_ms=200)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError, match="unknown"):
        ModelConfig.from_dict({**cfg.to_dict(), "dropout": 0.1})


def test_state_dict_roundtrip_and_mismatch():
    a = HdcamModel(named_variant("XXSmall"), seed=1)
    b = HdcamModel(named_variant("XXSmall"), seed=2)
    b.load_state_dict(a.state_dict())
    for k, v in a.state_dict().items():
        np.testing.assert_array_equal(v, b.params[k].data)
    with pytest.raises(Exception):
        HdcamModel(named_variant("Small")).load_state_dict(a.state_dict())


def test_init_deterministic_under_seed():
    a = HdcamModel(named_variant("Small"), seed=5).state_dict()
    b = HdcamModel(named_variant("Small"), seed=5).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
