"""Exit criteria, one test (or a small group) per criterion.

Each test carries ``@criterion(number, title)``; the terminal summary prints
one PASS/FAIL line per criterion with the measured values. The desk-scale
sweep behind criteria 5 to 8 and 12 takes about half an hour on one core. Its
results are kept in pytest's cache, keyed by a hash of the package sources
and the sweep setup, so any code change triggers a fresh run.
"""
import dataclasses
import hashlib
import json
import pathlib
import time

import numpy as np
import pytest

import querytagger
from querytagger import engine as E
from querytagger.adversarial import (PerturbationConfig, find_adversarial_perturbation,
                                     flip_rate, project, sample_virtual_perturbation, sym_kl,
                                     virtual_loss)
from querytagger.corpus import (GenConfig, Vocabulary, augment_with_titles, encode_batch,
                                generate_synthetic_corpus)
from querytagger.evaluation import span_f1
from querytagger.model import ModelConfig, TaggerModel, supervised_loss
from querytagger.training import Corpora, PipelineConfig, build_vocab, run_pipeline
from querytagger.ablation import apply_cell, cell_name
from querytagger.weak import (DemonstrationPool, MockLabeler, PromptStrategy,
                              evaluate_prompt_strategy, format_response, hashed_embedder,
                              parse_labels)

from oracles import ToyLinear, brute_f1, gradcheck, random_bio, random_graph

pytestmark = pytest.mark.acceptance
criterion = pytest.mark.criterion

SEEDS = [0, 1, 2, 3, 4]
FULL = {"k": 3, "mode": "adversarial"}
CELLS = {
    "adversarial": FULL,
    "virtual": {"k": 3, "mode": "virtual"},
    "vanilla": {"k": 3, "mode": "vanilla"},
    "k0": {"k": 0, "mode": "adversarial"},
    "k1": {"k": 1, "mode": "adversarial"},
    "k2": {"k": 2, "mode": "adversarial"},
    "no_pretrain": {"k": 3, "mode": "adversarial", "pretrain": False},
    "strong_only": {"k": 3, "mode": "vanilla", "pretrain": False, "weak": False},
}
FLIP_CELLS = ("adversarial", "virtual", "vanilla")


@pytest.fixture(scope="session")
def desk_corpus():
    return generate_synthetic_corpus(GenConfig(seed=0))


def _source_digest() -> str:
    root = pathlib.Path(querytagger.__file__).parent
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.suffix in (".py", ".pyx", ".txt") and "__pycache__" not in path.parts:
            h.update(str(path.relative_to(root)).encode())
            h.update(path.read_bytes())
    h.update(json.dumps([CELLS, SEEDS, PipelineConfig().to_dict(), GenConfig().to_dict()],
                        sort_keys=True).encode())
    return h.hexdigest()


def _flip_rate(model, corpus, vocab, pcfg: PerturbationConfig, seed: int) -> float:
    batch = encode_batch(corpus.test, vocab, corpus.scheme, 3, PipelineConfig().max_seq_len)
    return flip_rate(model, batch, pcfg, E.Rng(seed).child("flip"), draws=3)


def _run_sweep(corpus):
    corpora = Corpora(corpus.unlabeled, corpus.weak, corpus.strong, corpus.test, corpus.scheme)
    vocab = build_vocab(corpora)
    base = PipelineConfig()
    out = {}
    for seed in SEEDS:
        prefix_cache: dict = {}
        for name, cell in CELLS.items():
            cfg = dataclasses.replace(apply_cell(base, cell), seed=seed)
            res = run_pipeline(corpora, cfg, vocab=vocab, cache=prefix_cache)
            row = {"f1": res.test.f1, "brand_f1": res.test.category_f1("Brand")}
            if name in FLIP_CELLS:
                row["flip"] = _flip_rate(res.model, corpus, vocab, base.stage3.perturbation, seed)
            out[f"{name}/{seed}"] = row
            print(f"[sweep] seed {seed} {cell_name(cell)}: f1={row['f1']:.4f}", flush=True)
    return out


@pytest.fixture(scope="session")
def sweep(request, desk_corpus):
    key = "querytagger/desk-sweep"
    digest = _source_digest()
    stored = request.config.cache.get(key, None)
    if stored and stored.get("digest") == digest:
        results = stored["results"]
    else:
        results = _run_sweep(desk_corpus)
        request.config.cache.set(key, {"digest": digest, "results": results})

    def scores(name, metric="f1"):
        return np.array([results[f"{name}/{s}"][metric] for s in SEEDS])
    return scores


def _fmt(values):
    return "/".join(f"{v:.3f}" for v in values)


# ---------------------------------------------------------------- 1

@criterion(1, "autodiff matches central finite differences")
def test_autodiff_on_random_graphs(detail):
    worst = max(gradcheck(*random_graph(seed)[:2]) for seed in range(100))
    detail(f"worst rel err over 100 graphs {worst:.1e}")
    assert worst < 1e-3


@criterion(1, "autodiff matches central finite differences")
def test_virtual_loss_gradient_wrt_perturbation(detail, desk_corpus):
    vocab = Vocabulary.from_examples(desk_corpus.test)
    cfg = ModelConfig(len(vocab), desk_corpus.scheme.num_tags, embed_dim=8, encoder_layers=1,
                      ffn_dim=12)
    model = TaggerModel(cfg, E.Rng(0))
    batch = encode_batch(desk_corpus.test[:3], vocab, desk_corpus.scheme, 1, 64)
    x = model.embed(batch).x.data
    clean = model.classify(E.Tensor(x), batch.pad_mask).data
    delta0 = E.Rng(1).normal(x.shape) * 0.1

    def loss(d):
        return virtual_loss(lambda z: model.classify(z, batch.pad_mask), E.Tensor(x), d,
                            batch.loss_mask, clean)
    err = gradcheck(loss, [delta0])
    detail(f"virtual-loss input gradient rel err {err:.1e}")
    assert err < 1e-3


# ---------------------------------------------------------------- 2

@criterion(2, "divergence properties and exact projection")
def test_sym_kl_properties(detail):
    rng = np.random.default_rng(0)
    worst_id = worst_sym = 0.0
    lowest = np.inf
    for _ in range(1000):
        c = int(rng.integers(2, 8))
        p = rng.dirichlet(np.ones(c) * rng.uniform(0.2, 3))
        q = rng.dirichlet(np.ones(c) * rng.uniform(0.2, 3))
        pq, qp = sym_kl(p[None], q[None]).item(), sym_kl(q[None], p[None]).item()
        worst_id = max(worst_id, abs(sym_kl(p[None], p[None]).item()))
        worst_sym = max(worst_sym, abs(pq - qp))
        lowest = min(lowest, pq)
    detail(f"|D(p,p)|<={worst_id:.0e} |D(p,q)-D(q,p)|<={worst_sym:.0e} min D={lowest:.1e}")
    assert worst_id <= 1e-10 and worst_sym <= 1e-10 and lowest >= -1e-10


@criterion(2, "divergence properties and exact projection")
@pytest.mark.parametrize("norm", ["l2", "linf"])
def test_projection_is_exact(norm, detail):
    rng = np.random.default_rng(1)
    cfg = PerturbationConfig(epsilon=0.5, norm=norm)
    for _ in range(1000):
        d = rng.normal(size=(1, 4, 3)) * rng.uniform(0.01, 2)
        once = project(d, cfg)
        assert np.array_equal(project(once, cfg), once)
        flat = once.reshape(1, -1)
        size = np.linalg.norm(flat, axis=1) if norm == "l2" else np.abs(flat).max(axis=1)
        assert size <= cfg.epsilon
    detail(f"{norm}: 1000/1000 idempotent and inside")


# ---------------------------------------------------------------- 3

@criterion(3, "PGD finds near-maximal perturbations on a toy model")
def test_pgd_near_grid_maximum(detail):
    t0 = time.perf_counter()
    cfg = PerturbationConfig(epsilon=0.01, norm="l2")
    close = 0
    for seed in range(100):
        toy = ToyLinear(seed)
        pert = find_adversarial_perturbation(toy, toy.x, cfg, E.Rng(seed))
        close += toy.virtual_losses(pert.delta)[0] >= 0.9 * toy.grid_max(cfg.epsilon)
    adv, rnd = [], []
    for seed in range(50):
        toy = ToyLinear(1000 + seed)
        rng = E.Rng(seed)
        adv.append(toy.virtual_losses(
            find_adversarial_perturbation(toy, toy.x, cfg, rng.child("pgd")).delta)[0])
        rnd.append(toy.virtual_losses(
            sample_virtual_perturbation(toy.x.shape, cfg, rng.child("random")).delta)[0])
    elapsed = time.perf_counter() - t0
    detail(f"{close}/100 within 10% of grid max; mean adv {np.mean(adv):.2e} > random "
           f"{np.mean(rnd):.2e}; {elapsed:.1f}s")
    assert close >= 90
    assert np.mean(adv) > np.mean(rnd)
    assert elapsed < 60


# ---------------------------------------------------------------- 4

@criterion(4, "title, separator and padding positions carry no loss")
def test_loss_masking_is_exact(detail, desk_corpus):
    vocab = Vocabulary.from_examples(desk_corpus.test)
    scheme = desk_corpus.scheme
    batch = encode_batch(desk_corpus.test[:16], vocab, scheme, 3, 64)
    model = TaggerModel(ModelConfig(len(vocab), scheme.num_tags, embed_dim=16), E.Rng(0))
    emb = model.embed(batch)
    logits = E.Tensor(model.tag_logits(emb).data, requires_grad=True)
    clean = E.softmax(E.Tensor(logits.data)).data
    shifted = emb.x + 0.3 * E.Rng(2).normal(emb.x.shape)
    pert = E.Tensor(model.tag_logits(shifted, batch.pad_mask).data, requires_grad=True)
    loss = supervised_loss(logits, batch) + sym_kl(clean, E.softmax(pert), batch.loss_mask)
    grads = E.backward(loss, accumulate=False)
    off = batch.loss_mask == 0
    assert off.sum() > batch.loss_mask.sum()
    assert not np.any(grads[logits][off]) and not np.any(grads[pert][off])
    assert np.any(grads[logits][~off])

    before = supervised_loss(logits, batch).item()
    scrambled = batch.tag_ids.copy()
    scrambled[off] = np.random.default_rng(0).integers(0, scheme.num_tags, off.sum())
    batch2 = dataclasses.replace(batch, tag_ids=scrambled)
    after = supervised_loss(logits, batch2).item()
    detail(f"{int(off.sum())} masked positions, zero gradient, loss {before!r} == {after!r}")
    assert before == after


@criterion(4, "title, separator and padding positions carry no loss")
def test_title_labels_never_reach_the_loss(desk_corpus):
    ex = desk_corpus.test[0]
    aug = augment_with_titles(ex, 3)
    assert sum(aug.loss_mask) == len(ex.query)
    assert all(m == 0 for m in aug.loss_mask[len(ex.query):])


# ---------------------------------------------------------- 5 to 8

@pytest.mark.slow
@criterion(5, "full pipeline beats strong-only training")
def test_full_pipeline_beats_strong_only(sweep, detail):
    full, strong = sweep("adversarial"), sweep("strong_only")
    wins = int(np.sum(full > strong))
    detail(f"full {_fmt(full)} vs strong-only {_fmt(strong)}; "
           f"mean gap {np.mean(full - strong):+.4f}, wins {wins}/5")
    assert np.mean(full - strong) > 0
    assert wins >= 4


@pytest.mark.slow
@criterion(6, "adversarial >= virtual >= vanilla fine-tuning")
def test_augmentation_ordering(sweep, detail):
    adv, virt, van = sweep("adversarial"), sweep("virtual"), sweep("vanilla")
    detail(f"means adv {adv.mean():.4f} virt {virt.mean():.4f} vanilla {van.mean():.4f}")
    assert np.mean(adv - virt) >= 0
    assert np.mean(virt - van) >= 0
    assert np.mean(adv - van) >= 0


@pytest.mark.slow
@criterion(7, "masked-token pretraining helps")
def test_pretraining_helps(sweep, detail):
    on, off = sweep("adversarial"), sweep("no_pretrain")
    detail(f"with {_fmt(on)} (mean {on.mean():.4f}) vs without {_fmt(off)} "
           f"(mean {off.mean():.4f})")
    assert on.mean() > off.mean()


@pytest.mark.slow
@criterion(8, "more titles help")
def test_title_count_series(sweep, detail):
    means = [sweep(f"k{k}").mean() for k in range(3)] + [sweep("adversarial").mean()]
    detail("k=0..3 means " + " ".join(f"{m:.4f}" for m in means))
    assert means[1] - means[0] > 0
    assert all(b >= a for a, b in zip(means, means[1:]))


@criterion(8, "more titles help")
def test_generator_lengths(detail, desk_corpus):
    exs = desk_corpus.unlabeled[:10_000]
    query = np.mean([len(e.query) for e in exs])
    augmented = np.mean([len(augment_with_titles(e, 3).tokens) for e in exs])
    detail(f"mean query length {query:.2f}, with three titles {augmented:.2f}")
    assert abs(query - 3.9) <= 0.5
    assert abs(augmented - 20.8) <= 2.0


# ---------------------------------------------------------------- 9

@criterion(9, "prompt strategies rank CoT > demonstrations > plain prompting")
def test_prompt_strategy_ordering(detail, desk_corpus):
    scheme = desk_corpus.scheme
    pool = DemonstrationPool.build(desk_corpus.strong, hashed_embedder())
    client = MockLabeler(desk_corpus.lexicon, scheme)
    brand = {}
    for kind in ("prompting", "demonstration", "cot"):
        rep, _ = evaluate_prompt_strategy(PromptStrategy(kind), desk_corpus.test, client, scheme,
                                          pool)
        brand[kind] = rep.category_f1("Brand")
    detail(" ".join(f"{k} {v:.3f}" for k, v in brand.items()))
    assert brand["cot"] > brand["demonstration"] > brand["prompting"]


@criterion(9, "prompt strategies rank CoT > demonstrations > plain prompting")
def test_response_round_trip(desk_corpus):
    gold = desk_corpus.strong + desk_corpus.test
    assert len(gold) >= 1000
    for ex in gold[:1000]:
        text = format_response(ex.query, ex.tags, desk_corpus.scheme)
        assert parse_labels(text, ex.query, desk_corpus.scheme) == ex.tags


# ---------------------------------------------------------------- 10

@pytest.mark.slow
@criterion(10, "runs are reproducible byte for byte")
def test_reproducible_runs(tmp_path, detail):
    corpus = generate_synthetic_corpus(GenConfig(seed=0, n_unlabeled=5000, n_weak=1000))
    corpora = Corpora(corpus.unlabeled, corpus.weak, corpus.strong, corpus.test, corpus.scheme)
    cfg = PipelineConfig(seed=2)
    for name in ("a", "b"):
        run_pipeline(corpora, cfg, tmp_path / name)
    files = ["metrics.json", "stage1.ckpt", "stage2.ckpt", "stage3.ckpt"]
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in files]
    detail(", ".join(f"{f} {'identical' if s else 'DIFFERS'}" for f, s in zip(files, same)))
    assert all(same)


# ---------------------------------------------------------------- 11

@criterion(11, "span F1 equals the set-intersection oracle")
def test_span_f1_against_oracle(detail):
    rng = np.random.default_rng(11)
    cats = ["Brand", "Product", "Location", "Attribute"]
    for _ in range(1000):
        n = int(rng.integers(1, 5))
        lengths = rng.integers(1, 10, size=n)
        gold = [random_bio(rng, int(m), cats) for m in lengths]
        pred = [random_bio(rng, int(m), cats) for m in lengths]
        rep = span_f1(gold, pred)
        assert (rep.precision, rep.recall, rep.f1) == brute_f1(gold, pred)
    detail("1000/1000 instances equal")


# ---------------------------------------------------------------- 12

@pytest.mark.slow
@criterion(12, "adversarial fine-tuning lowers the argmax-flip rate")
def test_flip_rate(sweep, detail, desk_corpus):
    assert len(desk_corpus.test) >= 500
    adv, van = sweep("adversarial", "flip"), sweep("vanilla", "flip")
    detail(f"flip rate adv {_fmt(adv)} (mean {adv.mean():.4f}) vs vanilla {_fmt(van)} "
           f"(mean {van.mean():.4f})")
    assert adv.mean() < van.mean()
