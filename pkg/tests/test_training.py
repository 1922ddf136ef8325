import dataclasses
import json

import numpy as np
import pytest

from querytagger import engine as E
from querytagger import training
from querytagger.ablation import apply_cell, cell_name, cross_product, run_ablation
from querytagger.evaluation import SpanReport
from querytagger.model import ModelConfig, TaggerModel, load_checkpoint
from querytagger.training import (Corpora, DataContext, PipelineConfig, StageConfig,
                                  build_vocab, evaluate_model, mlm_accuracy, run_pipeline,
                                  self_training_baseline, split_dev, stage1_pretrain,
                                  stage2_weak_train, stage3_finetune, vat_baseline)


def tiny_pipeline(**over):
    cfg = PipelineConfig(embed_dim=16, encoder_layers=1, ffn_dim=24, heldout_size=20,
                         stage1=StageConfig(stage="I", epochs=1, batch_size=32),
                         stage2=StageConfig(stage="II", epochs=2, patience=1, batch_size=32),
                         stage3=StageConfig(stage="III", epochs=2, batch_size=16))
    return dataclasses.replace(cfg, **over)


@pytest.fixture(scope="module")
def setup(small_corpora):
    vocab = build_vocab(small_corpora)
    ctx = DataContext(vocab, small_corpora.scheme)
    mcfg = ModelConfig(len(vocab), small_corpora.scheme.num_tags, embed_dim=16,
                       encoder_layers=1, ffn_dim=24)
    return ctx, mcfg


def test_stage_config_validation():
    with pytest.raises(ValueError):
        StageConfig(stage="IV")
    with pytest.raises(ValueError):
        StageConfig(stage="II", patience=0)
    with pytest.raises(ValueError):
        StageConfig(mode="mixup")
    with pytest.raises(ValueError):
        StageConfig(lr=0.0)
    s = StageConfig(perturbation={"epsilon": 0.5, "norm": "linf"})
    assert s.perturbation.norm == "linf"


def test_pipeline_config_round_trip_and_unknown_keys():
    cfg = tiny_pipeline(seed=3)
    back = PipelineConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg
    with pytest.raises(ValueError, match="unknown"):
        PipelineConfig.from_dict({"stage4": {}})
    with pytest.raises(ValueError):
        PipelineConfig(dev_fraction=1.0)
    with pytest.raises(ValueError):
        PipelineConfig(stage1=StageConfig(stage="II"))


def test_split_dev_is_deterministic_and_disjoint(small_corpus):
    train, dev = split_dev(small_corpus.strong, 0.1, 4)
    assert len(dev) == 6 and len(train) == 54
    assert split_dev(small_corpus.strong, 0.1, 4) == (train, dev)
    assert split_dev(small_corpus.strong, 0.1, 5)[1] != dev
    assert not {id(e) for e in train} & {id(e) for e in dev}


def test_masked_pretraining_learns(small_corpus, setup):
    ctx, mcfg = setup
    model = TaggerModel(mcfg, E.Rng(0))
    held = ctx.encode(small_corpus.unlabeled[:40], 0)
    before = mlm_accuracy(model, held, E.Rng(9))
    cls_before = model.params["cls_w"].data.copy()
    cfg = StageConfig(stage="I", epochs=4, batch_size=16, lr=3e-3)
    model, report = stage1_pretrain(model, small_corpus.unlabeled[40:], ctx, cfg,
                                    small_corpus.unlabeled[:40])
    after = report.extra["mlm_accuracy"][-1]
    assert after > before and after > 1 / mcfg.vocab_size
    assert min(report.train_loss[1:]) < report.train_loss[0]
    np.testing.assert_array_equal(model.params["cls_w"].data, cls_before)


def test_stages_reject_empty_sets(setup):
    ctx, mcfg = setup
    model = TaggerModel(mcfg, E.Rng(0))
    with pytest.raises(ValueError):
        stage1_pretrain(model, [], ctx, StageConfig(stage="I"))
    with pytest.raises(ValueError):
        stage2_weak_train(model, [], [], ctx, StageConfig(stage="II"))
    with pytest.raises(ValueError):
        stage3_finetune(model, [], ctx, StageConfig())
    with pytest.raises(ValueError):
        evaluate_model(model, [], ctx, 0)


def test_early_stopping_follows_dev_f1(monkeypatch, small_corpus, setup):
    ctx, mcfg = setup
    scripted = iter([0.1, 0.3, 0.2, 0.25, 0.5])
    states = []

    def fake_eval(model, examples, ctx, k, batch_size=128):
        states.append(model.state_dict())
        f1 = next(scripted)
        return SpanReport({}, f1, f1, f1, 0, 0, 0, 1.0)

    monkeypatch.setattr(training, "evaluate_model", fake_eval)
    model = TaggerModel(mcfg, E.Rng(0))
    cfg = StageConfig(stage="II", epochs=5, patience=2, batch_size=32)
    model, report = stage2_weak_train(model, small_corpus.weak, small_corpus.strong[:5], ctx, cfg)
    assert report.dev_f1 == [0.1, 0.3, 0.2, 0.25]
    assert report.stop_epoch == 4 and report.best_epoch == 2
    for name, arr in states[1].items():
        np.testing.assert_array_equal(model.params[name].data, arr)


def test_stage3_runs_every_mode(small_corpus, setup):
    ctx, mcfg = setup
    for mode in ("vanilla", "virtual", "adversarial"):
        model, report = stage3_finetune(TaggerModel(mcfg, E.Rng(0)), small_corpus.strong, ctx,
                                        StageConfig(epochs=2, batch_size=16), mode,
                                        small_corpus.test)
        assert report.stop_epoch == 2 and len(report.dev_f1) == 2
        assert ("virtual_loss" in report.extra) == (mode != "vanilla")
    with pytest.raises(ValueError):
        stage3_finetune(model, small_corpus.strong, ctx, StageConfig(), "dropout")


def test_pipeline_is_reproducible_byte_for_byte(tmp_path, small_corpora):
    cfg = tiny_pipeline(seed=7)
    run_pipeline(small_corpora, cfg, tmp_path / "a")
    run_pipeline(small_corpora, cfg, tmp_path / "b")
    for name in ("metrics.json", "metrics.tsv", "stage1.ckpt", "stage2.ckpt", "stage3.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_pipeline_chains_checkpoints(tmp_path, small_corpora):
    res = run_pipeline(small_corpora, tiny_pipeline(seed=1), tmp_path)
    assert set(res.reports) == {"I", "II", "III"}
    ck = load_checkpoint(tmp_path / "stage3.ckpt")
    assert ck.meta == {"stage": "III", "seed": 1}
    for name, t in res.model.params.items():
        np.testing.assert_array_equal(ck.model.params[name].data, t.data)
    metrics = json.loads((tmp_path / "metrics.json").read_text())
    assert metrics["test"]["overall"]["f1"] == res.test.f1
    assert "wall_time" not in json.dumps(metrics)
    assert "wall_time" in (tmp_path / "report.json").read_text()


def test_skipped_stages_and_missing_data(small_corpora):
    res = run_pipeline(small_corpora, tiny_pipeline(skip_stage1=True, skip_stage2=True))
    assert set(res.reports) == {"III"}
    empty = Corpora([], small_corpora.weak, small_corpora.strong, small_corpora.test)
    with pytest.raises(ValueError, match="unlabeled"):
        run_pipeline(empty, tiny_pipeline())


def test_prefix_cache_gives_identical_results(small_corpora):
    cells = [{"mode": "vanilla"}, {"mode": "virtual"}]
    base = tiny_pipeline()
    cached = run_ablation(small_corpora, base, cells, [0])
    vocab = build_vocab(small_corpora)
    for cell, res in zip(cells, cached.results):
        fresh = run_pipeline(small_corpora, dataclasses.replace(apply_cell(base, cell), seed=0),
                             vocab=vocab)
        assert res.f1 == fresh.test.f1 and res.error is None


def test_ablation_helpers():
    cells = cross_product({"k": [0, 1], "mode": ["vanilla", "adversarial"]})
    assert cells[0] == {"mode": "vanilla", "k": 0} and len(cells) == 4
    assert cell_name({"k": 2, "pretrain": False}) == "pretrain=False,k=2"
    cfg = apply_cell(PipelineConfig(), {"pretrain": False, "weak": False, "mode": "virtual",
                                        "k": 1})
    assert cfg.skip_stage1 and cfg.skip_stage2 and cfg.stage3.mode == "virtual"
    assert cfg.title_count == 1 and PipelineConfig().title_count == 3
    with pytest.raises(ValueError):
        apply_cell(PipelineConfig(), {"lr": 1})


def test_failing_cell_is_recorded(small_corpora):
    broken = Corpora(small_corpora.unlabeled, [], small_corpora.strong, small_corpora.test)
    sweep = run_ablation(broken, tiny_pipeline(skip_stage1=True), [{"weak": True},
                                                                   {"weak": False}], [0])
    assert sweep.results[0].error and sweep.results[0].f1 is None
    assert sweep.results[1].error is None
    assert "weak=False" in sweep.to_tsv()


def test_semi_supervised_baselines_run(small_corpus, setup):
    ctx, mcfg = setup
    cfg = StageConfig(epochs=1, batch_size=16)
    _, rep = self_training_baseline(TaggerModel(mcfg, E.Rng(0)), small_corpus.strong,
                                    small_corpus.unlabeled[:50], ctx, cfg, rounds=2,
                                    dev=small_corpus.test)
    assert len(rep.extra["round_dev_f1"]) == 3
    _, rep = vat_baseline(TaggerModel(mcfg, E.Rng(0)), small_corpus.strong,
                          small_corpus.unlabeled[:50], ctx, cfg)
    assert len(rep.extra["vat_loss"]) == 4 and all(v >= 0 for v in rep.extra["vat_loss"])
    with pytest.raises(ValueError):
        self_training_baseline(TaggerModel(mcfg, E.Rng(0)), small_corpus.strong, [], ctx, cfg)
