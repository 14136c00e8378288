# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

"""
Experiment presets.

Each preset regenerates its synthetic corpus from a pinned seed, splits it once, then
trains every condition with every seed.  The report has one row per run and a summary
(mean and sample standard deviation over seeds) per condition.
"""
import csv
import logging
import os
from typing import Any, List, Optional, Sequence, Tuple

import attrs
from attrs import field, frozen

from kvformer.converter import CONVERTER
from kvformer.datagen import dungeons_preset, generate_dungeons, generate_tabular, load_presets, tabular_preset
from kvformer.document import Object
from kvformer.encoding import PositionEncodingKind
from kvformer.evaluation import EvaluationError, Summary, aggregate
from kvformer.pipeline import split
from kvformer.training import MetricsEntry, TrainConfig, n_success, train

SUMMARY_METRICS = ["trainAccuracy", "testAccuracy", "nSuccess", "trainLoss", "testLoss", "lossGap"]


@frozen
class ExperimentCondition:
    """A named set of overrides applied to the preset's training config."""

    name: str
    pe_kind: Optional[PositionEncodingKind] = None
    guardrails: Optional[bool] = None
    upscale: Optional[int] = None
    shuffle: Optional[bool] = None

    def apply(self, config: TrainConfig) -> TrainConfig:
        overrides = {a.name: getattr(self, a.name) for a in attrs.fields(ExperimentCondition) if a.name != "name"}
        return attrs.evolve(config, **{key: value for key, value in overrides.items() if value is not None})


@frozen
class ExperimentPreset:
    dataset: str
    instances: int
    seeds: Tuple[int, ...] = field(converter=tuple)
    conditions: Tuple[ExperimentCondition, ...] = field(converter=tuple)
    training: TrainConfig = field(factory=TrainConfig)


@frozen
class RunRecord:
    """Final results of one training run."""

    condition: str
    seed: int
    steps: int
    train_loss: Optional[float]
    test_loss: Optional[float]
    loss_gap: Optional[float]
    train_accuracy: Optional[float]
    test_accuracy: Optional[float]
    n_success: Optional[int]


@frozen
class ExperimentReport:
    preset: str
    rows: Tuple[RunRecord, ...] = field(converter=tuple)
    summary: Tuple[Summary, ...] = field(converter=tuple)


def preset_names() -> List[str]:
    return list(load_presets("experiments").keys())


def experiment_preset(name: str) -> ExperimentPreset:
    presets = load_presets("experiments")
    if name not in presets:
        raise EvaluationError("Unknown experiment preset %s; expected one of %s" % (name, ", ".join(presets)))
    return CONVERTER.structure(presets[name], ExperimentPreset)


def experiment_corpus(dataset: str, instances: int) -> List[Object]:
    """Regenerate a preset's corpus from its pinned data seed."""
    if dataset == "tabular":
        return generate_tabular(attrs.evolve(tabular_preset(), n_instances=instances))
    return generate_dungeons(attrs.evolve(dungeons_preset(dataset), n_instances=instances))


def _last_evaluation(metrics: Sequence[MetricsEntry]) -> Optional[MetricsEntry]:
    evaluated = [entry for entry in metrics if entry.test_loss is not None or entry.test_accuracy is not None]
    return evaluated[-1] if evaluated else None


def run_record(condition: str, seed: int, metrics: Sequence[MetricsEntry]) -> RunRecord:
    """Summarize the metrics log of one run by its final evaluation."""
    last = _last_evaluation(metrics)
    train_loss = None
    if last is not None:
        train_loss = last.train_eval_loss if last.train_eval_loss is not None else last.train_loss
    test_loss = last.test_loss if last else None
    gap = test_loss - train_loss if test_loss is not None and train_loss is not None else None
    return RunRecord(
        condition=condition,
        seed=seed,
        steps=len(metrics),
        train_loss=train_loss,
        test_loss=test_loss,
        loss_gap=gap,
        train_accuracy=last.train_accuracy if last else None,
        test_accuracy=last.test_accuracy if last else None,
        n_success=n_success(metrics),
    )


def run_experiment(
    name: str,
    seeds: Optional[Sequence[int]] = None,
    num_batches: Optional[int] = None,
    instances: Optional[int] = None,
    out_dir: Optional[str] = None,
) -> ExperimentReport:
    """Run every condition of a preset with every seed; budgets may be overridden for smoke runs."""
    preset = experiment_preset(name)
    seeds = list(seeds) if seeds is not None else list(preset.seeds)
    training = preset.training if num_batches is None else attrs.evolve(preset.training, num_batches=num_batches)
    corpus = experiment_corpus(preset.dataset, instances or preset.instances)
    data = split(corpus, 1.0 - training.test_fraction, seed=0)
    logging.info("[%s] %d training and %d test documents", name, len(data.train), len(data.test))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    rows = []
    for condition in preset.conditions:
        for seed in seeds:
            config = attrs.evolve(condition.apply(training), seed=seed)
            tag = "%s %s seed=%d" % (name, condition.name, seed)
            if out_dir:
                path = os.path.join(out_dir, "%s-seed%d.csv" % (condition.name, seed))
                with open(path, "w", encoding="utf-8", newline="") as fp:
                    result = train(data.train, config, test=data.test, metrics_fp=fp, tag=tag)
            else:
                result = train(data.train, config, test=data.test, tag=tag)
            rows.append(run_record(condition.name, seed, result.metrics))
            logging.info("[%s] %s", tag, rows[-1])
    unstructured = [CONVERTER.unstructure(row) for row in rows]
    report = ExperimentReport(preset=name, rows=rows, summary=aggregate(unstructured, "condition", SUMMARY_METRICS))
    if out_dir:
        write_report(out_dir, report)
    return report


def _write_csv(path: str, records: Sequence[Any]) -> None:
    unstructured = [CONVERTER.unstructure(record) for record in records]
    with open(path, "w", encoding="utf-8", newline="") as fp:
        if not unstructured:
            return
        writer = csv.DictWriter(fp, fieldnames=list(unstructured[0].keys()), lineterminator="\n")
        writer.writeheader()
        writer.writerows(unstructured)


def write_report(out_dir: str, report: ExperimentReport) -> None:
    """Write rows.csv, summary.csv and report.json into the output directory."""
    _write_csv(os.path.join(out_dir, "rows.csv"), report.rows)
    _write_csv(os.path.join(out_dir, "summary.csv"), report.summary)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8", newline="\n") as fp:
        fp.write(CONVERTER.to_json(report))
        fp.write("\n")
