"""Smoke test for the `bars` extension module.

Build and install first:  maturin develop -m crates/python/Cargo.toml
"""

import math
import os
import tempfile

import bars


def main():
    ds = bars.Dataset.synthetic(users=120, items=300, seed=3)
    assert ds.num_users == 120 and ds.num_items == 300
    train, test = ds.split_random(0.3, 1)
    assert len(train) + len(test) == len(ds)

    model = bars.Model(train, dim=8, seed=0)
    report = model.fit(train, dev=test, algorithm="bars", comparator="smr", loss="log",
                       learning_rate=0.5, epochs=3, patience=3, seed=0)
    assert len(report["epochs"]) == 3
    assert all(math.isfinite(e["objective"]) for e in report["epochs"])

    metrics = model.evaluate(train, test, cutoffs=[5, 30])
    pop = bars.Model.popularity(train).evaluate(train, test, cutoffs=[5, 30])
    print("ndcg@30 bars %.4f pop %.4f" % (metrics["ndcg"][1], pop["ndcg"][1]))

    user = 0
    positives = train.positives(user)
    exact = model.estimate_rank(user, positives[0], positives, estimator="exact")
    scores = model.user_scores(user)
    assert exact == bars.true_rank(scores, positives[0], positives)
    full = model.estimate_rank(user, positives[0], positives, estimator="minibatch", q=1.0)
    batch = model.estimate_rank(user, positives[0], positives, estimator="batch")
    assert abs(full - batch) < 1e-9

    assert bars.comparator("mr", 1.0, 0.0) == 0.0
    assert abs(bars.rank_loss("log", math.e - 1.0) - 1.0) < 1e-12
    assert bars.rank_loss_grad("poly", 0.0, p=0.5) == 0.5

    rows = bars.variance_study(num_items=2000, true_ranks=[10], fractions=[0.1], resamples=200)
    assert {r["estimator"] for r in rows} == {"pairwise", "minibatch"}

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.json")
        model.save(path)
        again = bars.Model.load(path)
        assert again.score(0, 1) == model.score(0, 1)

    try:
        bars.Model(train, dim=0)
    except ValueError:
        pass
    else:
        raise AssertionError("dim=0 must be rejected")
    print("ok")


if __name__ == "__main__":
    main()
