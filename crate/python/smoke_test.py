"""Smoke test for the nnkg extension module.

    pip install --no-build-isolation ./crates/py
    python python/smoke_test.py
"""

import os
import tempfile

import nnkg


def main():
    bundle = nnkg.Bundle.toy(1)
    assert bundle.entity_count == 200 and bundle.relation_count == 40
    print(bundle.stats(), end="")

    assert nnkg.parse_query("(i (p 5 (e 9)) (p 1 (e 1)))")[0] == "2i"

    train_q = bundle.sample("1p", 2000, seed=1) + bundle.sample("2i", 1000, seed=2)
    test_q = bundle.sample("1p", 200, seed=3, split_name="test", require_hard=True)
    assert len(train_q) == 3000 and len(test_q) == 200

    # answers recomputed from the graph match the answers stored with a sample
    expr, line = train_q.expressions()[0], train_q.lines()[0]
    stored = sorted(int(e) for e in line.split("\t")[1].split(","))
    assert bundle.answers(expr, "train") == stored

    model = nnkg.Model("mlp", 32, bundle.entity_count, bundle.relation_count, seed=1, init_bound=0.5, hidden_dim=128)
    before = model.evaluate(test_q)["1p"]["mrr"]
    losses = model.train(train_q, 300, batch_size=256, learning_rate=4e-3, margin=4.0, negatives=32)
    assert model.iteration == 300
    head, tail = sum(losses[:50]) / 50, sum(losses[-50:]) / 50
    assert tail < head, (head, tail)
    after = model.evaluate(test_q)["1p"]["mrr"]
    print(f"loss {head:.3f} -> {tail:.3f}, test 1p MRR {before:.3f} -> {after:.3f}")

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.ckpt")
        model.save(path)
        again = nnkg.Model.load(path)
        assert again.rank(expr, 5) == model.rank(expr, 5)
        test_q.save(os.path.join(tmp, "test.queries"))
        assert nnkg.Queries.load(os.path.join(tmp, "test.queries")).lines() == test_q.lines()

    mixer = nnkg.Model("mlp-mixer", 32, bundle.entity_count, bundle.relation_count)
    try:
        mixer.embed("(i (p 0 (e 1)) (n (p 2 (e 3))))")
    except ValueError as e:
        print(f"mixer refuses negation: {e}")
    else:
        raise AssertionError("mixer accepted a negation query")
    print("ok")


if __name__ == "__main__":
    main()
