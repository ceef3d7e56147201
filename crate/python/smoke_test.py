"""Smoke test for the flowr Python module.

Build and install first:  pip install --no-build-isolation ./crates/python
"""

import math
import os
import tempfile

import flowr


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def main():
    # Online protocol on a one-dimensional stream.
    m = flowr.Model(1, prior_variance=25.0, noise_variance=0.5)
    first = m.predict([2.0])
    assert first.n_at_prediction == 0 and first.probs == [1.0]
    m.update([2.0], 1)
    second = m.predict([2.0])
    assert math.isclose(sum(second.probs), 1.0, rel_tol=1e-12)
    assert second.predicted == 1 and second.novelty_score < 0.5
    mean, var = m.class_posterior(1)
    assert close(mean[0], 2.0 * 25.0 / 25.5) and close(var, 1.0 / (1 / 25 + 2))
    preds = m.run_episode([[-9.0], [-9.1], [2.1]], [2, 2, 1])
    assert [p.n_at_prediction for p in preds] == [1, 2, 2]
    assert preds[0].novelty_score > 0.99 and preds[1].predicted == 2
    assert m.counts[0] >= 2 and m.n_classes == 2

    # CRP prior.
    probs = flowr.crp_probs([3, 1], a=0.5, b=1.0)
    assert close(sum(probs), 1.0) and close(probs[2], 2.0 / 5.0)

    # Metrics.
    pos, neg = [0.9, 0.8, 0.4], [0.1, 0.3, 0.5, 0.2]
    assert close(flowr.auroc(pos, neg), 11 / 12)
    assert 0.0 < flowr.h_measure(pos, neg) < 1.0
    assert flowr.h_measure([1.0], [0.0]) == 1.0
    roc = flowr.roc_curve(pos, neg)
    assert roc[0][:2] == (0.0, 0.0) and roc[-1][:2] == (1.0, 1.0)
    assert flowr.threshold_at_tpr(pos, 0.6) == (0.8, 2 / 3)

    # Errors surface as FlowrError.
    try:
        m.update([0.0], 7)
    except flowr.FlowrError as e:
        assert str(e).startswith("label_out_of_range")
    else:
        raise AssertionError("expected FlowrError")

    # Datasets and the CLI-compatible file format.
    x, y, means = flowr.generate_synthetic(12, 4, points_per_class=15, seed=3)
    assert len(x) == 180 and max(y) == 12 and len(means) == 12
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "w.fse")
        flowr.save_dataset(path, x, y)
        x2, y2 = flowr.load_dataset(path)
        assert x2 == x and y2 == y

    # Gradient certification.
    checks = flowr.grad_check(seed=1, configs=1)
    assert len(checks) == 4 and all(c["max_rel_error"] < 1e-4 for c in checks)

    # Checkpoint produced by the CLI, if one is given.
    ck_path = os.environ.get("FLOWR_SMOKE_CHECKPOINT")
    if ck_path:
        ck = flowr.Checkpoint.load(ck_path)
        xs, ys = flowr.generate_synthetic(12, ck.input_dim, points_per_class=15, seed=5)[:2]
        metrics = flowr.evaluate(ck, xs, ys, setting="sc", episodes=10, support_classes=5,
                                 novel_classes=3, queries=4)
        assert metrics["target_tpr"] == 0.15 and metrics["table"].startswith("method=flowr")
        support = [(f, l) for i, (f, l) in enumerate(zip(xs, ys)) if l <= 3 and i % 15 < 3]
        model = ck.small_context_model([f for f, _ in support], [l for _, l in support])
        # A new class starts at count 2 under the default rule, then increments.
        assert model.n_classes == 3 and model.counts == [4, 4, 4]

    print("flowr python smoke test: ok")


if __name__ == "__main__":
    main()
