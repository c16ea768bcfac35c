#!/usr/bin/env python3
"""Smoke test for the `slotforge` Python extension module.

Builds nothing itself: it locates the compiled cdylib under `target/`,
exposes it as an importable module, and checks a handful of exact values
(boundary conversion, metric math, loss scalars, baselines) plus an
encoder probe → segment → score round trip and a tiny training run.

Usage:
    cargo build -p slotforge-py [--release]
    python3 python/smoke_test.py
"""

import json
import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def import_slotforge():
    candidates = [
        REPO / "target" / profile / name
        for profile in ("release", "debug")
        for name in ("libslotforge.so", "slotforge.so", "libslotforge.dylib")
    ]
    built = next((p for p in candidates if p.exists()), None)
    if built is None:
        sys.exit(
            "error: compiled module not found; run `cargo build -p slotforge-py` first"
        )
    stage = Path(tempfile.mkdtemp(prefix="slotforge-py-"))
    shutil.copy2(built, stage / "slotforge.so")
    sys.path.insert(0, str(stage))
    import slotforge

    return slotforge


def approx(a, b, tol=1e-9):
    assert abs(a - b) <= tol * max(1.0, abs(a), abs(b)), f"{a} !~ {b}"


def main():
    sf = import_slotforge()
    tmp = Path(tempfile.mkdtemp(prefix="slotforge-smoke-"))

    # Boundary label derivation and segmentation flattening.
    assert sf.derive_bt_gold(["O", "B-artist", "I-artist", "O"]) == ["B", "T", "B"]
    assert sf.derive_bt_gold(["O", "O"]) == ["NA"]
    assert sf.segmentation_to_bt([[0, 1], [2, 3]], 4) == ["T", "B", "T"]

    # Scoring: the classic worked example gives B-F1 = T-F1 = H-Mean = 2/3.
    report = sf.score_corpus([["B", "T", "T"]], [["B", "B", "T"]])
    approx(report["b_f1"], 2.0 / 3.0)
    approx(report["t_f1"], 2.0 / 3.0)
    approx(report["h_mean"], 2.0 / 3.0)
    counts = sf.score_bt(["B", "T", "T"], ["B", "B", "T"])
    assert counts["tp_b"] == 1 and counts["fn_b"] == 1 and counts["tp_t"] == 1
    approx(sf.h_mean(0.5, 1.0), 2.0 / 3.0)
    assert sf.h_mean(0.0, 0.0) == 0.0

    # Contrastive scalars against frozen closed forms.
    approx(sf.infonce(0.5, 0.5, 0.1), math.log(2.0))
    approx(sf.infonce(0.8, 0.2, 0.1), 0.002475685137730450, tol=1e-12)
    approx(sf.matrix_similarity([[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0]]), 1.0 / math.sqrt(2.0))
    approx(sf.matrix_similarity([[1.0, 0.0]], [[2.0, 0.0]], "mean_rowcos"), 1.0)

    # Segmentation utilities.
    assert sf.random_segmentation(5, 1, 0) == [(0, 4)]
    seg = sf.random_segmentation(6, 3, 42)
    assert len(seg) == 3 and seg[0][0] == 0 and seg[-1][1] == 5
    assert sf.random_segmentation(4, 4, 7, avoid_cuts=[1, 2, 3]) is None
    assert sf.branching_baseline(4, 2, "rb") == [(0, 0), (1, 1), (2, 3)]
    assert sf.branching_baseline(4, 2, "lb") == [(0, 1), (2, 2), (3, 3)]
    assert sf.crop_keep_indices(5, 0.4, 3) == sorted(sf.crop_keep_indices(5, 0.4, 3))
    assert len(sf.crop_keep_indices(5, 0.4, 3)) == 3

    # Segmenting a hand-built impact matrix: strong (0,1) and (2,3) blocks
    # with weak cross terms must cut between tokens 1 and 2 first.
    f = [
        [0.0, 9.0, 0.1, 0.1],
        [9.0, 0.0, 0.1, 0.1],
        [0.1, 0.1, 0.0, 9.0],
        [0.1, 0.1, 9.0, 0.0],
    ]
    assert sf.segment_matrix(f, 1) == [(0, 1), (2, 3)]

    # Corpus synthesis, loading, and intent-disjoint splitting.
    corpus_path = tmp / "synthetic.jsonl"
    sf.write_synthetic_corpus(corpus_path, 24, 5)
    utts = sf.load_corpus(corpus_path)
    assert len(utts) == 24
    assert all(len(u["tokens"]) == len(u["slots"]) for u in utts)
    split = sf.split_by_intent(corpus_path, 0.5, 1)
    assert len(split["p1_intents"]) + len(split["p2_intents"]) == 4
    assert not set(split["p1_intents"]) & set(split["p2_intents"])

    # Encoder: probe shapes, determinism, checkpoint round trip.
    enc = sf.Encoder.from_corpus(corpus_path, d_h=16, layers=1, heads=2, ffn_mult=2, max_len=16, seed=9)
    assert enc.d_h == 16 and enc.layers == 1 and enc.seed == 9
    tokens = utts[0]["tokens"]
    cls, hidden = enc.encode(tokens)
    assert len(cls) == 16 and len(hidden) == len(tokens) and len(hidden[0]) == 16
    masked_cls, _ = enc.encode(tokens, masked=[0])
    assert masked_cls != cls
    impact = enc.impact_matrix(tokens)
    t = len(tokens)
    assert len(impact) == t and all(len(row) == t for row in impact)
    assert all(impact[i][i] == 0.0 for i in range(t))
    assert all(impact[i][j] >= 0.0 for i in range(t) for j in range(t))
    spans = enc.segment(tokens, 2)
    assert spans[0][0] == 0 and spans[-1][1] == t - 1
    assert sf.segment_matrix(impact, 2) == spans

    ckpt = tmp / "enc.ckpt"
    enc.save(ckpt)
    enc2 = sf.Encoder.load(ckpt)
    assert enc2.encode(tokens) == (cls, hidden)
    assert enc2.segment(tokens, 2) == spans

    # Boundary scoring of probed segmentations against gold BIO tags.
    preds = [sf.segmentation_to_bt([list(s) for s in enc.segment(u["tokens"], 2)], len(u["tokens"])) for u in utts]
    golds = [sf.derive_bt_gold(u["slots"]) for u in utts]
    report = sf.score_corpus(preds, golds, aggregation="micro")
    assert 0.0 <= report["h_mean"] <= 1.0
    assert report["counts"]["n_boundaries_scored"] > 0

    # A tiny two-epoch training run writes a loadable checkpoint.
    train_path, valid_path = tmp / "train.jsonl", tmp / "valid.jsonl"
    sf.write_synthetic_corpus(train_path, 20, 11)
    sf.write_synthetic_corpus(valid_path, 8, 12)
    config = tmp / "tiny.cfg"
    config.write_text(
        "depth = 2\nbeta = 0.2\ntau_s = 0.1\ntau_d = 0.05\ndelta = 0.3\ngamma = 0.7\n"
        "batch_size = 4\nlearning_rate = 1e-3\nepochs = 2\nseed = 3\n"
        "d_h = 8\nlayers = 1\nheads = 2\nffn_mult = 2\nmax_len = 16\n"
    )
    run_dir = tmp / "run"
    report = sf.train_files(train_path, valid_path, config, run_dir)
    assert report["epochs"] == 2 and report["best_epoch"] in (1, 2)
    assert len(report["mean_total"]) == 2 and all(math.isfinite(x) for x in report["mean_total"])
    trained = sf.Encoder.load(run_dir / "encoder.ckpt")
    assert trained.d_h == 8
    assert json.dumps(report["valid_h_mean"])  # serializable, finite floats

    print("smoke test passed: module behavior matches the library contracts")


if __name__ == "__main__":
    main()
