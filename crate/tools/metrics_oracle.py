#!/usr/bin/env python3
"""Brute-force caption metric oracle.

Writes the golden corpus and its scores to crates/core/tests/data/golden_metrics.json.
Every metric is computed the slow, obvious way: explicit n-gram lists, all
subsequences for LCS, all alignments for METEOR, dense vectors for CIDEr-D.
"""
import itertools
import json
import math
import random
import sys
from collections import Counter
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "crates/core/tests/data/golden_metrics.json"


def ngrams(sent, n):
    return [tuple(sent[i:i + n]) for i in range(len(sent) - n + 1)]


def bleu(cands, refs, max_n=4):
    c_len = sum(len(c) for c in cands)
    r_len = 0
    for c, rs in zip(cands, refs):
        lens = sorted(len(r) for r in rs)
        r_len += min(lens, key=lambda l: (abs(l - len(c)), l))
    bp = 0.0 if c_len == 0 else (1.0 if c_len >= r_len else math.exp(1 - r_len / c_len))
    precisions = []
    for n in range(1, max_n + 1):
        hit = tot = 0
        for c, rs in zip(cands, refs):
            grams = ngrams(c, n)
            tot += len(grams)
            for g in set(grams):
                best_ref = max(ngrams(r, n).count(g) for r in rs)
                hit += min(grams.count(g), best_ref)
        precisions.append((hit, tot))
    out = []
    for n in range(1, max_n + 1):
        ps = precisions[:n]
        if any(h == 0 or t == 0 for h, t in ps):
            out.append(0.0)
        else:
            out.append(100.0 * bp * math.exp(sum(math.log(h / t) for h, t in ps) / n))
    return out


def is_subseq(sub, seq):
    it = iter(seq)
    return all(any(x == y for y in it) for x in sub)


def lcs(a, b):
    for k in range(len(a), 0, -1):
        for idx in itertools.combinations(range(len(a)), k):
            if is_subseq([a[i] for i in idx], b):
                return k
    return 0


def rouge(cands, refs, beta=1.2):
    total = 0.0
    for c, rs in zip(cands, refs):
        best = 0.0
        for r in rs:
            l = lcs(c, r)
            if l == 0:
                continue
            p, rec = l / len(c), l / len(r)
            best = max(best, (1 + beta ** 2) * p * rec / (rec + beta ** 2 * p))
        total += best
    return 100.0 * total / len(cands)


def alignments(c, r):
    """Every one-to-one exact alignment as a list of (i, j) pairs."""
    result = []

    def rec(i, used, pairs):
        if i == len(c):
            result.append(list(pairs))
            return
        rec(i + 1, used, pairs)
        for j, w in enumerate(r):
            if w == c[i] and j not in used:
                pairs.append((i, j))
                rec(i + 1, used | {j}, pairs)
                pairs.pop()

    rec(0, frozenset(), [])
    return result


def chunks(pairs):
    n = 0
    prev = None
    for i, j in sorted(pairs):
        if prev is None or prev != (i - 1, j - 1):
            n += 1
        prev = (i, j)
    return n


def meteor_sentence(c, r):
    als = alignments(c, r)
    m = max(len(a) for a in als)
    if m == 0:
        return 0.0
    ch = min(chunks(a) for a in als if len(a) == m)
    p, rec = m / len(c), m / len(r)
    f = 10 * p * rec / (rec + 9 * p)
    return f * (1 - 0.5 * (ch / m) ** 3)


def meteor(cands, refs):
    return 100.0 * sum(max(meteor_sentence(c, r) for r in rs) for c, rs in zip(cands, refs)) / len(cands)


def cider_d(cands, refs, sigma=6.0):
    n_docs = len(refs)
    df = Counter()
    for rs in refs:
        df.update({g for r in rs for n in range(1, 5) for g in ngrams(r, n)})
    vocab = sorted(df)

    def idf(g):
        if n_docs == 1:
            return 1.0
        return math.log(n_docs) - math.log(max(1.0, df.get(g, 0)))

    def dense(sent, n):
        tf = Counter(ngrams(sent, n))
        keys = sorted(set(vocab) | set(tf))
        return {g: tf.get(g, 0) * idf(g) for g in keys if len(g) == n}

    total = 0.0
    for c, rs in zip(cands, refs):
        acc = 0.0
        for r in rs:
            delta = len(ngrams(c, 2)) - len(ngrams(r, 2))
            gauss = math.exp(-delta * delta / (2 * sigma * sigma))
            for n in range(1, 5):
                vc, vr = dense(c, n), dense(r, n)
                keys = set(vc) | set(vr)
                dot = sum(min(vc.get(g, 0.0), vr.get(g, 0.0)) * vr.get(g, 0.0) for g in keys)
                nc = math.sqrt(sum(v * v for v in vc.values()))
                nr = math.sqrt(sum(v * v for v in vr.values()))
                if nc != 0 and nr != 0:
                    dot /= nc * nr
                acc += dot * gauss / 4
        total += 10.0 * acc / len(rs)
    return total / len(cands)


def golden_corpus():
    rng = random.Random(20240611)
    words = ["a", "dog", "cat", "runs", "on", "the", "grass", "with", "ball", "red"]
    items = [
        ("a dog runs on the grass", ["a dog runs on the grass", "the dog is running"]),
        ("b a", ["a b"]),
        ("a b c d", ["a c b d"]),
        ("the cat", ["a cat sits on the mat", "the cat is on a mat"]),
        ("red ball red ball", ["a red ball", "the ball is red"]),
    ]
    while len(items) < 20:
        cand = " ".join(rng.choice(words) for _ in range(rng.randint(1, 7)))
        refs = [" ".join(rng.choice(words) for _ in range(rng.randint(2, 7))) for _ in range(rng.randint(1, 3))]
        items.append((cand, refs))
    return items


def main():
    items = golden_corpus()
    cands = [c.split() for c, _ in items]
    refs = [[r.split() for r in rs] for _, rs in items]
    b = bleu(cands, refs)
    scores = {
        "B1": b[0], "B2": b[1], "B3": b[2], "B4": b[3],
        "M": meteor(cands, refs),
        "R": rouge(cands, refs),
        "C": cider_d(cands, refs),
    }
    per_item = [
        {"M": 100 * max(meteor_sentence(c, r) for r in rs), "R": rouge([c], [rs])}
        for c, rs in zip(cands, refs)
    ]
    doc = {
        "items": [{"candidate": c, "references": rs} for c, rs in items],
        "scores": scores,
        "per_item": per_item,
    }
    OUT.write_text(json.dumps(doc, indent=2) + "\n")
    json.dump(scores, sys.stdout, indent=2)
    print()


if __name__ == "__main__":
    main()
