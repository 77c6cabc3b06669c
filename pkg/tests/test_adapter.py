import numpy as np
import pytest

from paratool import autodiff as ad
from paratool.adapter import (AdapterConfig, AdapterStore, ComposedDelta, LowRankAdapter, apply, compose,
                              init_adapter, load_store, save_store)
from paratool.binfile import TruncatedFile, VersionMismatch
from paratool.model import ModelConfig, TransformerModel
from paratool.rng import Rng

MCFG = ModelConfig(hidden=16, layers=2, heads=2, d_ff=32, max_len=32)


def rank1(A, B, scale=1.0, tool_id=0):
    cfg = AdapterConfig(rank=1, scale=scale, sites=("up",))
    return LowRankAdapter(tool_id, cfg, {(0, "up"): (np.array(A, float), np.array(B, float))})


def random_adapter(tool_id, g, cfg=AdapterConfig(rank=4, scale=16.0), mcfg=MCFG):
    factors = {}
    for l in range(mcfg.layers):
        for site in cfg.sites:
            out_dim, in_dim = mcfg.site_shape(site)
            factors[(l, site)] = (g.normal(size=(out_dim, cfg.rank)), g.normal(size=(in_dim, cfg.rank)))
    return LowRankAdapter(tool_id, cfg, factors)


def test_published_scale_factor():
    assert AdapterConfig(rank=16, scale=64).factor == 4.0


def test_materialize_rank1_outer_product():
    a = rank1([[1], [2]], [[3], [4]])
    assert compose([a], [1.0]).materialize(0, "up").tolist() == [[3, 4], [6, 8]]
    a4 = LowRankAdapter(0, AdapterConfig(rank=16, scale=64, sites=("up",)),
                        {(0, "up"): (np.array([[1.0], [2.0]]), np.array([[3.0], [4.0]]))})
    assert (a4.cfg.factor * (a4.factors[(0, "up")][0] @ a4.factors[(0, "up")][1].T)).tolist() == [[12, 16], [24, 32]]


def test_cancellation_to_zero():
    a, b = rank1([[1], [2]], [[3], [4]]), rank1([[-1], [-2]], [[3], [4]], tool_id=1)
    assert not compose([a, b], [0.5, 0.5]).materialize(0, "up").any()


def test_one_hot_and_identical_pairs(g):
    a, b = random_adapter(0, g), random_adapter(1, g)
    assert np.array_equal(compose([a, b], [0.0, 1.0]).materialize(1, "down"), b.delta(1, "down"))
    twin = b.copy()
    twin.tool_id = 2
    assert np.allclose(compose([b, twin], [0.5, 0.5]).materialize(0, "up"), b.delta(0, "up"), atol=1e-12)


def test_weighted_materialize_matches_dense_sum(g):
    a, b = random_adapter(0, g), random_adapter(1, g)
    got = compose([a, b], [0.3, 0.7]).materialize(0, "up")
    assert np.allclose(got, 0.3 * a.delta(0, "up") + 0.7 * b.delta(0, "up"), atol=1e-12, rtol=0)


def test_linearity_in_alpha(g):
    ads = [random_adapter(i, g) for i in range(3)]
    a1, a2, lam = np.array([0.2, 0.5, 0.3]), np.array([0.6, 0.1, 0.3]), 0.35
    lhs = compose(ads, lam * a1 + (1 - lam) * a2).materialize(0, "down")
    rhs = lam * compose(ads, a1).materialize(0, "down") + (1 - lam) * compose(ads, a2).materialize(0, "down")
    assert np.allclose(lhs, rhs, atol=1e-10, rtol=0)


def test_simplex_and_length_errors(g):
    a, b = random_adapter(0, g), random_adapter(1, g)
    with pytest.raises(ValueError):
        compose([a, b], [0.6, 0.6])
    with pytest.raises(ValueError):
        compose([a, b], [1.0])
    with pytest.raises(ValueError):
        compose([a, b], [1.2, -0.2])


def test_efficient_apply_matches_materialized(g):
    ads = [random_adapter(i, g) for i in range(3)]
    alpha = g.dirichlet(np.ones(3))
    x = g.normal(size=(5, MCFG.d_ff))
    W = g.normal(size=(MCFG.hidden, MCFG.d_ff))
    d = compose(ads, alpha)
    want = x @ (W + d.materialize(1, "down")).T
    assert np.max(np.abs(apply(x, W, d, 1, "down") - want)) < 1e-9


def test_zero_b_apply_is_exact(g):
    a = init_adapter(0, MCFG, AdapterConfig(rank=4, scale=16), Rng(0))
    x, W = g.normal(size=(3, 16)), g.normal(size=(32, 16))
    assert np.array_equal(apply(x, W, compose([a], [1.0]), 0, "up"), x @ W.T)


def test_per_row_alpha(g):
    ads = [random_adapter(i, g) for i in range(2)]
    alphas = np.array([[1.0, 0.0], [0.25, 0.75]])
    x = g.normal(size=(2, 3, MCFG.hidden))
    d = ComposedDelta(ads, alphas)
    out = d.ffn(ad.const(x), 0, "up").data
    for row in range(2):
        assert np.allclose(out[row], x[row] @ d.materialize(0, "up", row).T, atol=1e-10)
    with pytest.raises(ad.ShapeError):
        d.ffn(ad.const(x[:1]), 0, "up")


def test_init_deterministic_and_zero():
    cfg = AdapterConfig()
    a = init_adapter(3, MCFG, cfg, Rng(5))
    b = init_adapter(3, MCFG, cfg, Rng(5))
    assert a.fingerprint() == b.fingerprint()
    assert init_adapter(4, MCFG, cfg, Rng(5)).fingerprint() != a.fingerprint()
    assert all(not B.any() for _, B in a.factors.values())
    A = a.factors[(0, "up")][0]
    assert A.shape == (MCFG.d_ff, 16) and 0.015 < A.std() < 0.025


def test_zero_delta_forward_bitwise():
    model = TransformerModel.init(MCFG, Rng(0))
    a = init_adapter(0, MCFG, AdapterConfig(rank=4), Rng(0))
    ids = np.arange(10) % 50
    base = model.forward(ids).data
    assert base.tobytes() == model.forward(ids, compose([a], [1.0])).data.tobytes()


def test_store_round_trip_and_selective(tmp_path, g):
    store = AdapterStore(AdapterConfig(rank=4, scale=16.0), [random_adapter(i, g) for i in range(12)], MCFG)
    path = tmp_path / "s.ptad"
    save_store(store, path)
    assert load_store(path).equal(store)
    part = load_store(path, [3, 7])
    assert part.ids() == [3, 7]
    assert part[7].fingerprint() == store[7].fingerprint()
    with pytest.raises(KeyError):
        load_store(path, [99])


def test_store_rejects_corruption(tmp_path, g):
    store = AdapterStore(AdapterConfig(rank=4, scale=16.0), [random_adapter(0, g)], MCFG)
    path = tmp_path / "s.ptad"
    save_store(store, path)
    raw = path.read_bytes()
    (tmp_path / "bad.ptad").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(VersionMismatch):
        load_store(tmp_path / "bad.ptad")
    (tmp_path / "short.ptad").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(TruncatedFile):
        load_store(tmp_path / "short.ptad")


def test_store_rejects_mixed_configs(g):
    store = AdapterStore(AdapterConfig(rank=4, scale=16.0))
    store.add(random_adapter(0, g))
    with pytest.raises(ValueError):
        store.add(random_adapter(0, g))
    with pytest.raises(ValueError):
        store.add(random_adapter(1, g, cfg=AdapterConfig(rank=2)))


def test_factored_path_uses_fewer_macs(g):
    mcfg = ModelConfig(hidden=64, layers=1, heads=2, d_ff=128, max_len=16)
    cfg = AdapterConfig(rank=8, scale=16.0)
    ads = [random_adapter(i, g, cfg, mcfg) for i in range(4)]
    d = compose(ads, np.full(4, 0.25))
    x = ad.const(g.normal(size=(10, 64)))
    with ad.count_macs() as eff:
        d.ffn(x, 0, "up")
    with ad.count_macs() as dense:
        for a in ads:  # forming each (out, in) delta, then one dense product
            ad.matmul(ad.const(a.factors[(0, "up")][0]), ad.transpose(ad.const(a.factors[(0, "up")][1]), (1, 0)))
        ad.linear(x, ad.const(d.materialize(0, "up")))
    assert 0 < eff[0] < dense[0]
