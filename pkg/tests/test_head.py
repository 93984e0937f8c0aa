import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import softmax_rows
from soap import tensor as T
from soap.gradcheck import finite_diff_check
from soap.head import (
    HeadConfig,
    Prototype,
    attention_logits,
    build_prototype,
    classify,
    classify_batch,
    distance,
    episode_distances,
    init_head_params,
    loss_ce,
    prototype_values,
)
from soap.params import ModelParams
from soap.tensor import ShapeError, Tensor

F, D = 4, 6


def make(d_k=5, d_v=3, seed=0) -> ModelParams:
    params = ModelParams()
    init_head_params(HeadConfig(d_k=d_k, d_v=d_v), D, params, np.random.default_rng(seed))
    return params


def feats(rng, *lead):
    return Tensor(rng.normal(size=lead + (F, D)))


def test_prototype_against_loop_oracle(rng):
    params = make()
    q = feats(rng)
    supports = [feats(rng) for _ in range(3)]

    def lin(x, name):
        return x @ params[f"head.{name}.weight"].data + params[f"head.{name}.bias"].data

    def ln(x):
        mu = x.mean(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(x.var(axis=-1, keepdims=True) + 1e-5)

    want = np.zeros((F, 3))
    for s in supports:
        a = ln(lin(q.data, "psi")) @ ln(lin(s.data, "gamma")).T
        want += softmax_rows(a) @ lin(s.data, "lambda")
    want /= 3
    got = build_prototype(q, supports, params).value.data
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_identical_shots_reproduce_single_shot(rng):
    params = make()
    q, s = feats(rng), feats(rng)
    one = build_prototype(q, [s], params).value.data
    for k in (2, 5):
        np.testing.assert_array_equal(build_prototype(q, [s] * k, params).value.data, one)


def test_single_frame_prototype_is_mean_value(rng):
    params = make()
    q = Tensor(rng.normal(size=(1, D)))
    ss = [Tensor(rng.normal(size=(1, D))) for _ in range(3)]
    w, b = params["head.lambda.weight"].data, params["head.lambda.bias"].data
    want = np.mean([s.data @ w + b for s in ss], axis=0)
    np.testing.assert_allclose(build_prototype(q, ss, params).value.data, want, atol=1e-14)


def test_full_width_prototype_shape(rng):
    params = ModelParams()
    init_head_params(HeadConfig(d_k=1152, d_v=1152), D, params, rng)
    q = Tensor(rng.normal(size=(8, D)))
    assert build_prototype(q, [Tensor(rng.normal(size=(8, D)))], params).value.shape == (8, 1152)


def test_shot_order_invariance(rng):
    params = make()
    q = feats(rng)
    ss = [feats(rng) for _ in range(4)]
    a = build_prototype(q, ss, params).value.data
    b = build_prototype(q, ss[::-1], params).value.data
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_empty_support_rejected(rng):
    with pytest.raises(ValueError):
        build_prototype(feats(rng), [], make())


def test_attention_rows_sum_to_one(rng):
    params = make()
    for _ in range(20):
        a = T.softmax(attention_logits(feats(rng), feats(rng), params), axis=-1).data
        np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-9)


def test_distance_cases(rng):
    params = make()
    q = feats(rng)
    projected = T.linear(q, params["head.lambda.weight"], params["head.lambda.bias"])
    assert distance(Prototype(projected, 0), q, params).item() == 0.0
    # all-ones difference over a 2×2 prototype
    p2 = make(d_v=2)
    q2 = Tensor(rng.normal(size=(2, D)))
    proj = T.linear(q2, p2["head.lambda.weight"], p2["head.lambda.bias"]).data
    assert distance(Prototype(Tensor(proj + 1.0), 0), q2, p2).item() == pytest.approx(2.0, abs=1e-14)
    with pytest.raises(ShapeError):
        distance(Prototype(Tensor(np.zeros((F, 7))), 0), q, params)


@settings(max_examples=50)
@given(arrays(np.float64, (3, 4, 3), elements=st.floats(-10, 10)))
def test_triangle_inequality(x):
    n = [np.linalg.norm(v) for v in (x[0] - x[2], x[0] - x[1], x[1] - x[2])]
    d = [T.frobenius_norm(Tensor(v), axes=(0, 1)).item() for v in (x[0] - x[2], x[0] - x[1], x[1] - x[2])]
    np.testing.assert_allclose(d, n, rtol=1e-12, atol=1e-12)
    assert d[0] <= d[1] + d[2] + 1e-9


def test_episode_distances_match_per_pair(rng):
    params = make()
    qs = feats(rng, 3)
    ss = feats(rng, 2, 2)
    dist = episode_distances(qs, ss, params).data
    for i in range(3):
        qi = Tensor(qs.data[i])
        for c in range(2):
            proto = build_prototype(qi, [Tensor(ss.data[c, k]) for k in range(2)], params)
            assert dist[i, c] == pytest.approx(distance(proto, qi, params).item(), abs=1e-12)


def test_prototypes_depend_on_query(rng):
    params = make()
    ss = feats(rng, 1, 2)
    p = prototype_values(feats(rng, 2), ss, params).data
    assert not np.allclose(p[0], p[1])


def test_classify_examples():
    assert classify([3.0, 1.0, 2.0]) == 1
    assert classify([2.0, 2.0, 2.0]) == 0
    assert classify([5.0]) == 0
    with pytest.raises(ValueError):
        classify([])


def test_loss_examples():
    assert loss_ce(Tensor(np.full(5, 3.7)), 2).item() == pytest.approx(math.log(5), abs=1e-12)
    d = np.full(5, 50.0)
    d[1] = 0.0
    assert loss_ce(Tensor(d), 1).item() < 1e-20
    with pytest.raises(ValueError):
        loss_ce(Tensor(np.ones(5)), 5)


@settings(max_examples=100)
@given(arrays(np.int64, 6, elements=st.integers(0, 160)), st.integers(-50, 50), st.integers(0, 5))
def test_shift_invariance_and_consistency(steps, c, y):
    # eighths plus an integer shift add exactly, so ties survive the shift
    d = steps / 8.0
    assert classify(d) == classify(d + c)
    assert loss_ce(Tensor(d), y).item() == pytest.approx(loss_ce(Tensor(d + c), y).item(), abs=1e-9)
    probs = T.softmax(Tensor(-d)).data
    assert probs[classify(d)] == probs.max()


def test_classify_batch_matches_rows(rng):
    d = rng.normal(size=(10, 5))
    assert classify_batch(d).tolist() == [classify(r) for r in d]


def test_loss_gradients_through_head(rng):
    params = make()
    for p in params.values():
        p.data[...] = rng.uniform(-0.5, 0.5, size=p.shape)
    qs = T.tensor(rng.normal(size=(3, F, D)), requires_grad=True)
    ss = T.tensor(rng.normal(size=(3, 2, F, D)), requires_grad=True)

    def f():
        return loss_ce(episode_distances(qs, ss, params), [0, 1, 2])

    report = finite_diff_check(f, dict(params.items(), q=qs, s=ss), samples=10, rng=rng)
    assert report.passed, report.per_param()
