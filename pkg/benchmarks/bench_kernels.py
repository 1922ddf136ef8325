"""Compare the compiled and numpy row-kernel backends.

Times every kernel on shapes the tagger actually produces (a batch of 32
augmented sequences of 24 tokens, width 64), then one full training step
of the default model, under each available backend.

    python benchmarks/bench_kernels.py [--repeat 50] [--json out.json]
"""
from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from querytagger.engine import kernels


def kernel_cases(rng):
    batch, length, width = 32, 24, 64
    hidden = rng.standard_normal((batch, length, width))
    scores = rng.standard_normal((batch, length, length))
    grad_h = rng.standard_normal(hidden.shape)
    grad_s = rng.standard_normal(scores.shape)
    gamma, beta = rng.standard_normal(width), rng.standard_normal(width)
    soft = kernels.softmax_fwd(scores)
    logsoft = kernels.log_softmax_fwd(scores)
    _, xhat, rstd = kernels.layer_norm_fwd(hidden, gamma, beta, 1e-5)
    return {
        "softmax_fwd": lambda: kernels.softmax_fwd(scores),
        "softmax_bwd": lambda: kernels.softmax_bwd(soft, grad_s),
        "log_softmax_fwd": lambda: kernels.log_softmax_fwd(scores),
        "log_softmax_bwd": lambda: kernels.log_softmax_bwd(logsoft, grad_s),
        "layer_norm_fwd": lambda: kernels.layer_norm_fwd(hidden, gamma, beta, 1e-5),
        "layer_norm_bwd": lambda: kernels.layer_norm_bwd(grad_h, xhat, rstd, gamma),
        "gelu_fwd": lambda: kernels.gelu_fwd(hidden),
        "gelu_bwd": lambda: kernels.gelu_bwd(hidden, grad_h),
    }


def training_step_case():
    from querytagger.corpus import GenConfig, Vocabulary, encode_batch, generate_synthetic_corpus
    from querytagger import engine as E
    from querytagger.engine import Adam, Rng
    from querytagger.model import DropoutPlan, ModelConfig, TaggerModel, supervised_loss

    corpus = generate_synthetic_corpus(GenConfig(n_unlabeled=0, n_weak=0, n_strong=64, n_test=0))
    vocab = Vocabulary.from_examples(corpus.strong)
    batch = encode_batch(corpus.strong[:32], vocab, corpus.scheme, 3, 64)
    model = TaggerModel(ModelConfig(len(vocab), corpus.scheme.num_tags), Rng(0))
    opt = Adam(model.tagging_parameters(), lr=1e-3)
    plan_rng = Rng(1)

    def step():
        plan = DropoutPlan(model.config.dropout_rate, plan_rng)
        loss = supervised_loss(model.tag_logits(model.embed(batch), batch.pad_mask, plan), batch)
        opt.zero_grad()
        E.backward(loss)
        opt.step()
    return step


def run(repeat: int):
    backends = ["python"]
    try:
        kernels.use_backend("cython")
        backends.insert(0, "cython")
    except ImportError:
        print("compiled extension unavailable; timing the numpy backend only", file=sys.stderr)
    results: dict[str, dict[str, float]] = {}
    for name in backends:
        kernels.use_backend(name)
        cases = kernel_cases(np.random.default_rng(0))
        cases["training_step"] = training_step_case()
        for case, fn in cases.items():
            fn()
            n = max(1, repeat // 10) if case == "training_step" else repeat
            best = min(timeit.repeat(fn, number=n, repeat=3)) / n
            results.setdefault(case, {})[name] = best * 1e6
    return backends, results


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--json", help="also write the timings (microseconds) here")
    args = ap.parse_args(argv)
    backends, results = run(args.repeat)
    header = f"{'kernel':<18}" + "".join(f"{b + ' us':>14}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for case, times in results.items():
        line = f"{case:<18}" + "".join(f"{times[b]:>14.1f}" for b in backends)
        if len(backends) == 2:
            line += f"{times['python'] / times['cython']:>9.2f}x"
        print(line)
    if args.json:
        with open(args.json, "w", encoding="utf-8") as f:
            json.dump(results, f, indent=2)


if __name__ == "__main__":
    main()
