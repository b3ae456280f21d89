import itertools
import math

import hypothesis.strategies as st
import numpy as np
import pytest
from hypothesis import given, settings

from sanet.autodiff import Tensor, float64_mode, relu
from sanet.losses import (TERMS, distance_matrix, id_loss, mine_batch_hard, total_loss,
                          triplet_loss)
from sanet.model import BranchOutputs, SANet, SANetConfig, assemble_embedding


def hinge(d_ap, d_an, m):
    return max(d_ap - d_an + m, 0.0)


def test_hinge_arithmetic():
    assert hinge(0.5, 1.0, 0.3) == 0.0
    assert hinge(1.0, 0.5, 0.3) == pytest.approx(0.8)
    # realised by anchor 0 of two 1-D layouts
    with float64_mode():
        satisfied = mine_batch_hard(Tensor([[0.0], [0.5], [-1.0], [-3.0]]), [0, 0, 1, 1])
        violated = mine_batch_hard(Tensor([[0.0], [1.0], [-0.5], [-3.0]]), [0, 0, 1, 1])
    for (d_ap, d_an), expect in ((satisfied, 0.0), (violated, 0.8)):
        value = relu(d_ap - d_an + 0.3).data[0]
        assert value == pytest.approx(expect, abs=1e-6)


def test_line_layout_mean_over_anchors():
    # ids 0 at 0 and 0.5, ids 1 at 1 and 1.5: the inner anchors sit at the margin
    with float64_mode():
        loss = triplet_loss(Tensor([[0.0], [0.5], [1.0], [1.5]]), [0, 0, 1, 1], margin=0.3).item()
    assert loss == pytest.approx((0.0 + 0.3 + 0.3 + 0.0) / 4, abs=1e-6)


def test_id_loss_uniform_and_mean():
    assert id_loss(Tensor(np.zeros((5, 8))), [0, 1, 2, 3, 7]).item() == pytest.approx(math.log(8), abs=1e-6)
    with float64_mode():
        z = np.array([[2.0, 0.0, -1.0], [0.5, 0.5, 3.0]])
        a = id_loss(Tensor(z[:1]), [0]).item()
        b = id_loss(Tensor(z[1:]), [1]).item()
        assert id_loss(Tensor(z), [0, 1]).item() == pytest.approx((a + b) / 2, abs=1e-12)


def test_id_loss_against_direct_oracle(rng):
    z = rng.normal(size=(6, 5))
    y = rng.integers(0, 5, size=6)
    oracle = np.mean([-z[i, y[i]] + math.log(sum(math.exp(v) for v in z[i])) for i in range(6)])
    with float64_mode():
        assert id_loss(Tensor(z), y).item() == pytest.approx(oracle, abs=1e-6)


def test_distance_matrix_loop_oracle(rng):
    x = rng.normal(size=(5, 7))
    with float64_mode():
        d = distance_matrix(Tensor(x)).data
    for i in range(5):
        for j in range(5):
            expect = math.sqrt(sum((x[i, k] - x[j, k]) ** 2 for k in range(7)))
            assert d[i, j] == pytest.approx(expect, abs=1e-6)


def test_hand_enumerable_mining():
    # identity 0 at x=0 and x=3, identity 1 at x=1 and x=10 (1-D embeddings)
    with float64_mode():
        d_ap, d_an = mine_batch_hard(Tensor([[0.0], [3.0], [1.0], [10.0]]), [0, 0, 1, 1])
    np.testing.assert_allclose(d_ap.data, [3.0, 3.0, 9.0, 9.0])
    np.testing.assert_allclose(d_an.data, [1.0, 2.0, 1.0, 7.0])


def test_identical_embeddings_give_zero_distances():
    d_ap, d_an = mine_batch_hard(Tensor(np.ones((6, 4))), [0, 0, 1, 1, 2, 2])
    np.testing.assert_allclose(d_ap.data, 1e-6, atol=1e-9)
    np.testing.assert_array_equal(d_ap.data, d_an.data)
    assert triplet_loss(Tensor(np.ones((6, 4))), [0, 0, 1, 1, 2, 2], 0.3).item() == pytest.approx(0.3, abs=1e-6)


def brute_force_batch_hard(x, labels, margin):
    """Per anchor, the hinge of the most violating (positive, negative) pair over all valid triplets."""
    n = len(labels)
    d = np.sqrt(((x[:, None] - x[None]) ** 2).sum(-1))
    per_anchor = []
    for a in range(n):
        worst = -np.inf
        for p, q in itertools.product(range(n), range(n)):
            if p != a and labels[p] == labels[a] and labels[q] != labels[a]:
                worst = max(worst, d[a, p] - d[a, q])
        per_anchor.append(max(worst + margin, 0.0))
    return float(np.mean(per_anchor))


@pytest.mark.parametrize("seed", range(10))
def test_mining_equals_exhaustive_enumeration(seed):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(4), 2)
    rng.shuffle(labels)
    x = rng.normal(size=(8, 3))
    with float64_mode():
        got = triplet_loss(Tensor(x), labels, 0.3).item()
    assert got == pytest.approx(brute_force_batch_hard(x, labels, 0.3), abs=1e-9)


def test_single_anchor_by_hand():
    with float64_mode():
        emb = Tensor([[0.0, 0.0], [3.0, 4.0], [1.0, 1.0], [6.0, 8.0]])
        d_ap, d_an = mine_batch_hard(emb, [0, 0, 1, 1])
    # anchor 0: positive at distance 5, nearest negative sqrt(2)
    assert d_ap.data[0] == pytest.approx(5.0)
    assert d_an.data[0] == pytest.approx(math.sqrt(2))


def test_label_validation():
    with pytest.raises(ValueError):
        triplet_loss(Tensor(np.zeros((3, 2))), [0, 0, 1])
    with pytest.raises(ValueError):
        triplet_loss(Tensor(np.zeros((3, 2))), [0, 0, 0])
    with pytest.raises(ValueError):
        triplet_loss(Tensor(np.zeros((4, 2))), [0, 0, 1, 1], margin=-1)


def _outputs(n_cls, emb_rng=None, constant=False, m=2):
    n, dg, dp = 6, 4, 3
    if constant:
        def mk(w):
            return Tensor(np.ones((n, w)))
    else:
        def mk(w):
            return Tensor(emb_rng.normal(size=(n, w)))
    logits = (lambda: Tensor(np.zeros((n, n_cls)))) if constant else (lambda: mk(n_cls))
    return BranchOutputs(f_g=mk(dg), parts_td=[mk(dp) for _ in range(m)], parts_lr=[mk(dp) for _ in range(m)],
                         theta=None, logits_g=logits(), logits_td=logits(), logits_lr=logits())


LABELS = np.array([0, 0, 1, 1, 2, 2])


def test_degenerate_batch_terms():
    _, br = total_loss(_outputs(5, constant=True), LABELS, margin=0.3)
    for k in ("L_ID_g", "L_ID_td", "L_ID_lr"):
        assert getattr(br, k) == pytest.approx(math.log(5), abs=1e-6)
    for k in TERMS[3:]:
        assert getattr(br, k) == pytest.approx(0.3, abs=1e-6)


def test_breakdown_matches_independent_terms(rng):
    with float64_mode():
        b = _outputs(3, rng)
        total, br = total_loss(b, LABELS, 0.3)
        oracle = {
            "L_ID_g": id_loss(b.logits_g, LABELS).item(),
            "L_ID_td": id_loss(b.logits_td, LABELS).item(),
            "L_ID_lr": id_loss(b.logits_lr, LABELS).item(),
            "L_tri_g": brute_force_batch_hard(b.f_g.data, LABELS, 0.3),
            "L_tri_t": brute_force_batch_hard(b.f_t.data, LABELS, 0.3),
            "L_tri_d": brute_force_batch_hard(b.f_d.data, LABELS, 0.3),
            "L_tri_l": brute_force_batch_hard(b.f_l.data, LABELS, 0.3),
            "L_tri_r": brute_force_batch_hard(b.f_r.data, LABELS, 0.3),
            "L_tri_gs": brute_force_batch_hard(assemble_embedding(b).data, LABELS, 0.3),
        }
    for k, v in oracle.items():
        assert getattr(br, k) == pytest.approx(v, abs=1e-6), k
    assert br.total == pytest.approx(sum(oracle.values()), abs=1e-6)
    assert total.item() == pytest.approx(br.total, abs=1e-6)


def test_zeroing_a_branch_is_local(rng):
    with float64_mode():
        b = _outputs(3, rng)
        _, before = total_loss(b, LABELS)
        b.parts_lr = [Tensor(np.zeros_like(p.data)) for p in b.parts_lr]
        _, after = total_loss(b, LABELS)
    changed = {k for k in TERMS if getattr(before, k) != getattr(after, k)}
    assert changed == {"L_tri_l", "L_tri_r", "L_tri_gs"}


def test_four_strips_average_halves(rng):
    with float64_mode():
        b = _outputs(3, rng, m=4)
        _, br = total_loss(b, LABELS)
        expect_t = np.mean([brute_force_batch_hard(p.data, LABELS, 0.3) for p in b.parts_td[:2]])
    assert br.L_tri_t == pytest.approx(expect_t, abs=1e-9)


def test_total_loss_on_model_outputs(rng):
    model = SANet(SANetConfig(input_size=16, trunk_channels=(4, 6, 8), branch_channels=8,
                              embed_dim_global=4, embed_dim_part=3, num_classes=3))
    out = model(Tensor(rng.uniform(size=(6, 3, 16, 16))))
    total, br = total_loss(out, LABELS)
    assert np.isfinite(total.item())
    assert set(br.to_dict()) == set(TERMS) | {"total"}


@settings(deadline=None, max_examples=50)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 2.0))
def test_triplet_loss_bounds(seed, margin):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(8, 3))
    labels = np.repeat(np.arange(4), 2)
    with float64_mode():
        loss = triplet_loss(Tensor(x), labels, margin).item()
    assert loss >= 0
    assert loss == pytest.approx(brute_force_batch_hard(x, labels, margin), abs=1e-9)


@settings(deadline=None, max_examples=30)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
def test_triplet_loss_scales_with_embeddings(seed, scale):
    # hinge removed (huge margin): the loss is linear in the embedding scale up to the margin
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(8, 3))
    labels = np.repeat(np.arange(4), 2)
    with float64_mode():
        base = triplet_loss(Tensor(x), labels, 1e3).item() - 1e3
        scaled = triplet_loss(Tensor(x * scale), labels, 1e3).item() - 1e3
    assert scaled == pytest.approx(base * scale, rel=1e-6, abs=1e-6)
