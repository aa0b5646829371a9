import numpy as np
import pytest

import tensor as T
from errors import ContractError, DimensionError
from nn_blocks import LinearLayer
from owm_optimizer import (
    AdamState,
    OWMTracker,
    OWMWarning,
    Projector,
    adam_step,
    compare_continual,
    project_gradient,
    projector_update,
)


def test_rank_one_closed_form():
    alpha = 1e-10
    pr = projector_update(Projector(3, alpha), np.array([1.0, 0.0, 0.0]))
    e1, e2 = np.eye(3)[0], np.eye(3)[1]
    assert np.allclose(pr.P @ e1, alpha / (1 + alpha) * e1, atol=1e-12)
    assert np.linalg.norm(pr.P @ e1) <= 1e-9
    assert np.array_equal(pr.P @ e2, e2)


def test_two_updates_deflate_their_span():
    pr = Projector(3, 1e-10)
    pr.update([1.0, 0.0, 0.0])
    pr.update([0.0, 1.0, 0.0])
    for v in ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.7, -0.3, 0.0]):
        assert np.linalg.norm(pr.P @ np.array(v)) < 1e-9
    assert np.allclose(pr.P @ np.eye(3)[2], np.eye(3)[2])


def test_zero_vector_warns_and_keeps_projector():
    pr = Projector(4)
    with pytest.warns(OWMWarning):
        pr.update(np.zeros(4))
    assert np.array_equal(pr.P, np.eye(4))
    with pytest.raises(DimensionError):
        pr.update(np.ones(3))


def test_fresh_projector_is_identity(rng):
    g = rng.normal(size=(5, 4))
    assert np.array_equal(project_gradient(Projector(4), g), g)
    with pytest.raises(DimensionError):
        Projector(4).project(np.ones((2, 3)))


def test_full_span_deflation(rng):
    pr = Projector(4, 1e-10)
    for x in rng.normal(size=(4, 4)):
        pr.update(x)
    g = rng.normal(size=(3, 4))
    assert np.linalg.norm(project_gradient(pr, g)) < 1e-6 * np.linalg.norm(g)


def test_projected_rows_orthogonal_to_recorded_inputs(rng):
    alpha = 1e-3
    pr = Projector(6, alpha)
    recorded = 2.0 * np.linalg.qr(rng.normal(size=(6, 3)))[0].T
    for x in recorded:
        pr.update(x)
    projected = pr.project(rng.normal(size=(5, 6)))
    for row in projected:
        for x in recorded:
            assert abs(row @ x) <= 10 * alpha * np.linalg.norm(row) * np.linalg.norm(x)


def test_symmetry_eigenvalues_and_monotone_deflation(rng):
    pr = Projector(5, 1e-3)
    first = rng.normal(size=5)
    pr.update(first)
    energy = first @ pr.P @ first
    for _ in range(1000):
        pr.update(rng.normal(size=5) * rng.uniform(0.1, 3.0))
        assert np.max(np.abs(pr.P - pr.P.T)) <= 1e-8
        eig = np.linalg.eigvalsh(pr.P)
        assert eig.min() >= -1e-8 and eig.max() <= 1 + 1e-8
        # the deflated energy xᵀPx of a recorded input never grows
        current = first @ pr.P @ first
        assert current <= energy + 1e-15
        energy = current


def test_adam_zero_gradient_leaves_parameters():
    p = T.Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = AdamState([p])
    adam_step(state, grads=[np.zeros(2)])
    assert np.array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_moves_by_learning_rate():
    p = T.Tensor(np.array([0.5]), requires_grad=True)
    state = AdamState([p], lr=1e-3)
    adam_step(state, grads=[np.ones(1)])
    assert p.data[0] == pytest.approx(0.5 - 1e-3 / (1 + 1e-8), abs=1e-15)


def test_adam_missing_gradient():
    p = T.Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ContractError):
        AdamState([p]).step()


def test_adam_skips_frozen():
    p = T.Tensor(np.ones(2), requires_grad=False)
    state = AdamState([p])
    state.step()
    assert np.array_equal(p.data, np.ones(2))


def test_saturated_projector_blocks_updates(rng):
    layer = LinearLayer(4, 3, seed=0, bias=False)
    pr = Projector(4, 1e-10)
    for x in rng.normal(size=(4, 4)):
        pr.update(x)
    before = layer.weight.data.copy()
    state = AdamState(layer.parameters(), lr=1e-2)
    for _ in range(5):
        state.zero_grad()
        T.reduce_sum(T.square(layer(T.Tensor(rng.normal(size=(8, 4)))))).backward()
        assert np.any(layer.weight.grad)
        state.step({id(layer.weight): pr})
    assert np.allclose(layer.weight.data, before, atol=1e-6)


def test_tracker_commits_at_boundary(rng):
    layer = LinearLayer(3, 2, seed=0)
    tracker = OWMTracker([layer], alpha=1e-3)
    layer(T.Tensor(rng.normal(size=(4, 3))))
    tracker.record_batch()
    assert np.array_equal(tracker.committed[0].P, np.eye(3))
    assert tracker.pending[0].updates == 1
    tracker.commit()
    assert tracker.projectors()[id(layer.weight)].updates == 1


@pytest.mark.slow
def test_projection_protects_first_task():
    summary = compare_continual(range(10))
    assert summary["median_task_a_owm"] < summary["median_task_a_plain"]


def test_compare_continual_accepts_a_generator():
    summary = compare_continual((s for s in (0, 1)), n=16, epochs=1)
    assert summary["seeds"] == [0, 1]
    assert len(summary["plain_runs"]) == len(summary["owm_runs"]) == 2
    assert [r["seed"] for r in summary["owm_runs"]] == [0, 1]
