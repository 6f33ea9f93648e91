"""Residual quantizer: nearest-code oracles, EMA updates, straight-through
gradients, reseeding, aggregates, and persistence."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import graphtok.tensor as T
from graphtok import rvq
from graphtok.rvq import (
    CodebookSet,
    assign_tokens,
    codebook_aggregate,
    ema_update,
    init_codebooks,
    kmeans_init,
    load_codebooks,
    load_tokens,
    memory_report,
    reseed_dead_codes,
    rvq_assign,
    rvq_batch,
    save_codebooks,
    save_tokens,
)
from graphtok.tensor import Tape, Tensor, grad_check, precision


def fresh_codebooks(rng, c=2, K=4, d=3, decay=0.9):
    codes = rng.normal(size=(c, K, d))
    return CodebookSet(codes, np.ones((c, K)), codes.copy(), decay)


def brute_force_assign(H, codes):
    """Per-vector, per-level python loop; first index wins ties."""
    c, K, d = codes.shape
    tokens = np.zeros((len(H), c), dtype=np.int64)
    z = np.zeros_like(H)
    for i, h in enumerate(H):
        resid = h.copy()
        for j in range(c):
            dists = [np.sum((resid - codes[j][k]) ** 2) for k in range(K)]
            best = int(np.argmin(dists))
            tokens[i, j] = best
            resid = resid - codes[j][best]
            z[i] += codes[j][best]
    return tokens, z


def test_assign_matches_brute_force(rng):
    C = fresh_codebooks(rng, c=3, K=5, d=4)
    H = rng.normal(size=(40, 4))
    tokens, z = assign_tokens(H, C)
    bt, bz = brute_force_assign(H, C.codes)
    np.testing.assert_array_equal(tokens, bt)
    np.testing.assert_allclose(z, bz, atol=1e-12)


def test_assign_tie_break_first_index():
    codes = np.zeros((1, 3, 2))
    codes[0, 0] = [1.0, 0.0]
    codes[0, 1] = [1.0, 0.0]   # duplicate of code 0
    codes[0, 2] = [5.0, 5.0]
    C = CodebookSet(codes, np.ones((1, 3)), codes.copy(), 0.9)
    tokens, _ = assign_tokens(np.array([[1.0, 0.0]]), C)
    assert tokens[0, 0] == 0


def test_rvq_assign_single_vector(rng):
    C = fresh_codebooks(rng, c=2, K=4, d=3)
    h = rng.normal(size=3)
    tokens, z, resid = rvq_assign(h, C)
    bt, bz = brute_force_assign(h[None, :], C.codes)
    np.testing.assert_array_equal(tokens, bt[0])
    np.testing.assert_allclose(z, bz[0], atol=1e-12)
    np.testing.assert_allclose(resid, h - z, atol=1e-12)


def test_residual_shrinks_with_levels(rng):
    """Nested codebooks: adding levels never increases mean distance."""
    H = rng.normal(size=(100, 6))
    C3 = init_codebooks(H, c=3, K=8, seed=0)
    errs = []
    for c in (1, 2, 3):
        Csub = CodebookSet(C3.codes[:c], C3.ema_mass[:c], C3.ema_sum[:c], C3.decay)
        _, z = assign_tokens(H, Csub)
        errs.append(np.linalg.norm(H - z, axis=1).mean())
    assert errs[0] >= errs[1] >= errs[2]


def test_kmeans_init_basic(rng):
    pts = np.concatenate([rng.normal(size=(30, 2)) + 8.0,
                          rng.normal(size=(30, 2)) - 8.0])
    centers = kmeans_init(pts, K=2, seed=1)
    assert centers.shape == (2, 2)
    signs = np.sort(np.sign(centers[:, 0]))
    np.testing.assert_array_equal(signs, [-1, 1])


def test_kmeans_more_clusters_than_points():
    pts = np.array([[0.0, 0.0], [1.0, 1.0]])
    centers = kmeans_init(pts, K=4, seed=0)
    assert centers.shape == (4, 2)
    assert np.isfinite(centers).all()


def test_kmeans_deterministic(rng):
    pts = rng.normal(size=(50, 3))
    a = kmeans_init(pts, 5, seed=3)
    b = kmeans_init(pts, 5, seed=3)
    np.testing.assert_array_equal(a, b)


def test_init_codebooks_levels_fit_residuals(rng):
    H = rng.normal(size=(80, 4))
    C = init_codebooks(H, c=2, K=6, seed=0)
    assert C.codes.shape == (2, 6, 4)
    # level 1 should be centered near the level-0 residual cloud
    t0 = rvq._nearest(H, C.codes[0])
    resid = H - C.codes[0][t0]
    assert np.abs(C.codes[1].mean(axis=0) - resid.mean(axis=0)).max() < 1.0


def test_rvq_batch_forward_equals_assignment(rng):
    C = fresh_codebooks(rng, c=2, K=4, d=3)
    H = Tensor(rng.normal(size=(20, 3)), requires_grad=True)
    tokens, Z, commit = rvq_batch(H, C)
    t2, z2 = assign_tokens(H.data, C)
    np.testing.assert_array_equal(tokens, t2)
    np.testing.assert_array_equal(Z.data, z2)


def test_straight_through_gradient_is_identity(rng):
    with precision(np.float64):
        C = fresh_codebooks(rng, c=2, K=4, d=3)
        H = Tensor(rng.normal(size=(10, 3)), requires_grad=True)
        with Tape() as tape:
            _, Z, _ = rvq_batch(H, C)
            loss = T.sum_(T.mul(Z, Tensor(np.arange(30.0).reshape(10, 3))))
        tape.backward(loss)
        np.testing.assert_allclose(H.grad, np.arange(30.0).reshape(10, 3))


def test_commit_eq8_oracle(rng):
    C = fresh_codebooks(rng, c=2, K=4, d=3)
    H = Tensor(rng.normal(size=(15, 3)))
    _, Z, commit = rvq_batch(H, C, commit_variant="eq8")
    want = np.linalg.norm(H.data - Z.data, axis=1).mean()
    np.testing.assert_allclose(commit.data, want, atol=1e-12)


def test_commit_alg2_oracle(rng):
    C = fresh_codebooks(rng, c=3, K=4, d=2)
    H = Tensor(rng.normal(size=(12, 2)))
    tokens, _, commit = rvq_batch(H, C, commit_variant="alg2")
    want = 0.0
    for i in range(12):
        cum = np.zeros(2)
        for j in range(3):
            cum += C.codes[j][tokens[i, j]]
            want += np.sum((H.data[i] - cum) ** 2)
    np.testing.assert_allclose(commit.data, want / 12, atol=1e-10)


def test_commit_unknown_variant(rng):
    C = fresh_codebooks(rng)
    with pytest.raises(ValueError):
        rvq_batch(Tensor(rng.normal(size=(4, 3))), C, commit_variant="x")


def test_commit_grads(rng):
    with precision(np.float64):
        C = fresh_codebooks(rng, c=2, K=4, d=3)
        H = Tensor(rng.normal(size=(8, 3)), requires_grad=True)
        for variant in ("eq8", "alg2"):
            err = grad_check(lambda *_: rvq_batch(H, C, variant)[2], [H])
            assert err < 1e-5, variant


def test_ema_update_exact_formula():
    """Hand-computed single-level update on a 5-point cluster."""
    d = 2
    codes = np.zeros((1, 2, d))
    codes[0, 0] = [0.0, 0.0]
    codes[0, 1] = [100.0, 100.0]
    C = CodebookSet(codes, np.ones((1, 2)), codes.copy(), 0.9)
    pts = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0], [9.0, 10.0]])
    tokens, _ = assign_tokens(pts, C)
    assert (tokens == 0).all()
    ema_update(C, pts, tokens)
    want = 0.9 * np.zeros(d) + 0.1 * pts.mean(axis=0)
    np.testing.assert_allclose(C.codes[0, 0], want, atol=1e-12)
    # untouched code stays exactly
    np.testing.assert_allclose(C.codes[0, 1], [100.0, 100.0], atol=0)


@pytest.mark.parametrize("tau,expect", [
    (0.0, "mean"),      # jumps straight to the cluster mean
    (1.0, "frozen"),    # ignores the batch entirely
])
def test_ema_update_limits(tau, expect):
    codes = np.array([[[2.0, 2.0]]])
    C = CodebookSet(codes.copy(), np.ones((1, 1)), codes.copy(), tau)
    pts = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [3.0, 3.0], [4.0, 4.0]])
    tokens, _ = assign_tokens(pts, C)
    ema_update(C, pts, tokens)
    if expect == "mean":
        np.testing.assert_allclose(C.codes[0, 0], pts.mean(axis=0), atol=1e-12)
    else:
        np.testing.assert_allclose(C.codes[0, 0], [2.0, 2.0], atol=1e-12)


def test_ema_update_second_level_uses_pre_update_codes(rng):
    """Level-1 residuals must come from the level-0 codes that made the
    assignment, not the freshly moved ones."""
    K = 3
    C = fresh_codebooks(rng, c=2, K=K, d=2, decay=0.5)
    old = C.codes.copy()
    H = rng.normal(size=(30, 2))
    tokens, _ = assign_tokens(H, C)
    ema_update(C, H, tokens)
    resid = H - old[0][tokens[:, 0]]
    for k in range(K):
        sel = resid[tokens[:, 1] == k]
        if len(sel):
            np.testing.assert_allclose(
                C.codes[1, k], 0.5 * old[1, k] + 0.5 * sel.mean(axis=0), atol=1e-10)
        else:
            np.testing.assert_allclose(C.codes[1, k], old[1, k], atol=0)


def test_ema_mass_tracks_usage(rng):
    C = fresh_codebooks(rng, c=1, K=2, d=2, decay=0.5)
    C.ema_mass[:] = 0.0
    H = np.tile(C.codes[0, 0][None, :], (10, 1))
    tokens, _ = assign_tokens(H, C)
    ema_update(C, H, tokens)
    np.testing.assert_allclose(C.ema_mass[0], [5.0, 0.0])


def test_reseed_replaces_dead_codes(rng):
    C = fresh_codebooks(rng, c=2, K=4, d=3)
    C.ema_mass[0, 1] = 0.0     # dead
    C.ema_mass[1, 2] = 1e-9    # dead
    before = C.codes.copy()
    H = rng.normal(size=(50, 3))
    n = reseed_dead_codes(C, H, np.random.default_rng(0))
    assert n == 2
    assert not np.allclose(C.codes[0, 1], before[0, 1])
    assert C.ema_mass[0, 1] == 1.0 and C.ema_mass[1, 2] == 1.0
    # live codes untouched
    np.testing.assert_array_equal(C.codes[0, 0], before[0, 0])


def test_reseed_noop_when_alive(rng):
    C = fresh_codebooks(rng)
    before = C.codes.copy()
    assert reseed_dead_codes(C, rng.normal(size=(20, 3)), np.random.default_rng(0)) == 0
    np.testing.assert_array_equal(C.codes, before)


def test_codebook_aggregate_single_and_batch(rng):
    C = fresh_codebooks(rng, c=3, K=4, d=2)
    t = np.array([1, 0, 3])
    want = C.codes[0, 1] + C.codes[1, 0] + C.codes[2, 3]
    np.testing.assert_allclose(codebook_aggregate(t, C), want, atol=1e-12)
    batch = np.stack([t, np.array([0, 0, 0])])
    out = codebook_aggregate(batch, C)
    np.testing.assert_allclose(out[0], want, atol=1e-12)
    np.testing.assert_allclose(out[1], C.codes[:, 0].sum(axis=0), atol=1e-12)


def test_codebook_aggregate_range_check(rng):
    C = fresh_codebooks(rng, c=2, K=4)
    with pytest.raises(IndexError):
        codebook_aggregate(np.array([0, 4]), C)


def test_memory_report_identity_cases():
    # 8 floats/node vs 2 indices/node, no codebook: 32B / 8B = 4
    assert memory_report(10, 8, 2, 4, 8, include_codebooks=False) == 4.0
    # adding the codebook bytes lowers the ratio
    assert memory_report(10, 8, 2, 4, 8) < 4.0


def test_memory_report_rejects_nonpositive():
    with pytest.raises(ValueError):
        memory_report(0, 8, 2, 4, 8)


def test_codebooks_roundtrip(tmp_path, rng):
    C = fresh_codebooks(rng, c=3, K=5, d=4, decay=0.77)
    C.ema_mass[1, 2] = 0.123
    p = tmp_path / "cb.bin"
    save_codebooks(p, C)
    C2 = load_codebooks(p)
    np.testing.assert_array_equal(C2.codes, C.codes)
    np.testing.assert_array_equal(C2.ema_mass, C.ema_mass)
    np.testing.assert_array_equal(C2.ema_sum, C.ema_sum)
    assert C2.decay == 0.77


def test_tokens_roundtrip(tmp_path, rng):
    tokens = rng.integers(0, 16, size=(30, 3))
    p = tmp_path / "tok.bin"
    save_tokens(p, tokens)
    out = load_tokens(p)
    assert out.dtype == np.int32
    np.testing.assert_array_equal(out, tokens)


def test_assign_preserves_input_dtype(rng):
    C = fresh_codebooks(rng)
    H = rng.normal(size=(6, 3)).astype(np.float32)
    _, z = assign_tokens(H, C)
    assert z.dtype == np.float32


@given(st.integers(1, 3), st.integers(2, 6), st.integers(5, 25))
@settings(max_examples=25, deadline=None)
def test_assignment_oracle_property(c, K, n):
    r = np.random.default_rng(c * 1000 + K * 10 + n)
    codes = r.normal(size=(c, K, 3))
    C = CodebookSet(codes, np.ones((c, K)), codes.copy(), 0.9)
    H = r.normal(size=(n, 3))
    tokens, z = assign_tokens(H, C)
    bt, bz = brute_force_assign(H, codes)
    np.testing.assert_array_equal(tokens, bt)
    np.testing.assert_allclose(z, bz, atol=1e-10)


@given(st.floats(0.0, 1.0), st.integers(3, 20))
@settings(max_examples=25, deadline=None)
def test_ema_interpolates_between_old_and_mean(tau, n):
    r = np.random.default_rng(int(tau * 997) + n)
    codes = r.normal(size=(1, 1, 2))
    C = CodebookSet(codes.copy(), np.ones((1, 1)), codes.copy(), tau)
    pts = r.normal(size=(n, 2))
    tokens, _ = assign_tokens(pts, C)
    ema_update(C, pts, tokens)
    want = tau * codes[0, 0] + (1 - tau) * pts.mean(axis=0)
    np.testing.assert_allclose(C.codes[0, 0], want, atol=1e-10)
