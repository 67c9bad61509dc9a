"""Smoke test for the Python bindings: recover features from one gradient
report, run a short text-recovery search, score it."""

import json

import poolerleak as pl


def main():
    vocab = pl.Vocab.bundled("toy_short", 512)
    sentence = "my wolf misses that sullen actress"
    ids = vocab.tokenize(sentence)
    assert vocab.detokenize(ids) == sentence, vocab.detokenize(ids)

    head = pl.Head(len(vocab), 64, 96, 2, 16, 8, activation="selu", loss="ce", seed=3)
    report = head.gradients([ids], [1])
    assert report.norm() > 0.0

    feats = pl.recover(report, head, 16, 1, path="ce", seed=3)
    # the recovered directions live in the first d_rec Pooler-input coordinates
    truth = [row[: head.d_rec] for row in head.pooler_inputs([ids], [1])]
    matched = feats.match_oracle(truth)
    q = sum(matched.quality) / len(matched.quality)
    print(f"feature |cos| {q:.3f}")
    assert q > 0.9, q

    corpus = [vocab.tokenize(line) for line in pl.bundled_text("toy_prior").splitlines()]
    prior = pl.NgramModel(corpus, len(vocab), 2, 0.1)
    assert prior.log_perplexity(ids) > 0.0

    cfg = json.loads(pl.default_attack_config())
    cfg.update(n_inits=4, rounds=1, continuous_steps=60)
    res = pl.attack(report, head, [len(ids)], [1], features=matched, prior=prior,
                    feature_phase="both", seed=0, config_json=json.dumps(cfg))
    r1, r2, rl = res.rouge([ids])[0]
    print("recovered:", vocab.detokenize(res.tokens[0]))
    print(f"rouge {r1:.3f} {r2:.3f} {rl:.3f} score {res.score:.4g}")
    assert 0.0 <= r1 <= 1.0

    assert pl.rouge(["a", "b", "c"], ["a", "c", "b"]) == (1.0, 0.0, 2.0 / 3.0)
    try:
        pl.Head(10, 4, 8, 2, 100, 4)
    except ValueError as e:
        print("rejected:", e)
    else:
        raise AssertionError("oversized d_rec accepted")
    print("smoke test ok")


if __name__ == "__main__":
    main()
