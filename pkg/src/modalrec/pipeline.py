"""Experiment orchestration: configs, artifacts, and full pipeline runs.

One :class:`ExperimentConfig` drives every stage.  Stages communicate
through files in ``out_dir`` (checkpoints, metric tables, curves), each of
which embeds the canonical JSON echo of the config that produced it, so a
rerun with the same config and seed reproduces every artifact byte for
byte.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import evaluation as ev
from . import training as tr
from .checkpoint import Checkpoint, load_checkpoint, meta_json, save_checkpoint
from .corpus import (MODALITIES, FinetuneData, Interaction, StoreSet,
                     SynthConfig, build_eval_instances, build_finetune_data,
                     build_pretrain_sequences, load_embedding_store,
                     load_interactions, merge_stores, synth_generate,
                     write_embedding_store, write_interactions)
from .errors import ConfigError
from .evaluation import MetricReport, VariantSpec, variant_by_name

ROBUSTNESS_RATIOS = (0.1, 0.3, 0.5, 1.0)
ROBUSTNESS_MODALITIES = ("text", "image")

PRETRAINED_NAME = "pretrained.ckpt"
FINETUNED_NAME = "finetuned.ckpt"


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one study run needs: data paths, domains, and hyperparameters.

    Training fields mirror :class:`training.TrainingConfig`; the rest name
    the corpus files, the domain roles, and the output directory.
    """

    interactions: str = ""
    embeddings: dict = field(default_factory=dict)  # domain -> modality -> path
    out_dir: str = "out"
    source_domains: tuple = ()
    target_domain: str = ""
    eval_ks: tuple = (5, 10, 20)
    eval_mode: str = "test"
    variant: str = "full"
    group_bounds: tuple = (0, 5, 20, 50)
    synth: SynthConfig | None = None
    # training hyperparameters (see TrainingConfig for semantics)
    tau: float = 0.07
    css_weight: float = 1e-3
    drop_ratio: float = 0.2
    learning_rate: float = 1e-3
    batch_size: int = 128
    pretrain_epochs: int = 30
    finetune_epochs: int = 200
    patience: int = 10
    d: int = 64
    experts: int = 8
    layers: int = 2
    heads: int = 2
    ffn_mult: int = 4
    dropout: float = 0.2
    max_len: int = 50
    css_mode: str = "original"
    seed: int = 0

    def training_config(self) -> tr.TrainingConfig:
        names = {f.name for f in fields(tr.TrainingConfig)}
        return tr.TrainingConfig(**{n: getattr(self, n) for n in names})

    def validate(self) -> None:
        self.training_config().validate()
        if self.synth is not None:
            self.synth.validate()
        variant_by_name(self.variant)
        if self.eval_mode not in ("valid", "test"):
            raise ConfigError(f"eval_mode must be 'valid' or 'test', "
                              f"got {self.eval_mode!r}")
        if not self.eval_ks or any(k < 1 for k in self.eval_ks):
            raise ConfigError(f"eval_ks must be positive, got {self.eval_ks}")
        if self.target_domain and self.target_domain in self.source_domains:
            raise ConfigError(f"target domain {self.target_domain!r} also "
                              "listed as source")
        for domain, paths in self.embeddings.items():
            unknown = set(paths) - set(MODALITIES)
            if unknown:
                raise ConfigError(f"unknown modalities for domain {domain!r}: "
                                  f"{sorted(unknown)}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out["source_domains"] = list(self.source_domains)
        out["eval_ks"] = list(self.eval_ks)
        out["group_bounds"] = list(self.group_bounds)
        out["synth"] = asdict(self.synth) if self.synth is not None else None
        return out

    def echo(self) -> str:
        return meta_json(self.to_dict())

    @classmethod
    def from_dict(cls, values: dict) -> "ExperimentConfig":
        values = dict(values)
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "synth" in values and values["synth"] is not None:
            synth = values["synth"]
            if not isinstance(synth, dict):
                raise ConfigError("synth section must be an object")
            synth_known = {f.name for f in fields(SynthConfig)}
            synth_unknown = set(synth) - synth_known
            if synth_unknown:
                raise ConfigError(f"unknown synth keys: {sorted(synth_unknown)}")
            values["synth"] = SynthConfig(**synth)
        for name in ("source_domains", "eval_ks", "group_bounds"):
            if name in values and values[name] is not None:
                values[name] = tuple(values[name])
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @classmethod
    def from_json_file(cls, path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            try:
                values = json.load(fh)
            except json.JSONDecodeError as err:
                raise ConfigError(f"{path}: invalid JSON: {err}") from None
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(values)

    def with_overrides(self, overrides: dict[str, str]) -> "ExperimentConfig":
        """Apply command-line overrides; values parse as JSON when possible,
        else stay strings.  ``synth.<field>`` reaches into the synth section."""
        values = self.to_dict()
        for key, raw in overrides.items():
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            if key.startswith("synth."):
                if values.get("synth") is None:
                    values["synth"] = asdict(SynthConfig())
                values["synth"][key[6:]] = value
            else:
                values[key] = value
        return ExperimentConfig.from_dict(values)


def synth_paths(data_dir, domains) -> tuple[str, dict]:
    """Conventional file names the synth stage writes under ``data_dir``."""
    interactions = os.path.join(data_dir, "interactions.tsv")
    embeddings = {domain: {modality: os.path.join(
        data_dir, f"embeddings_{domain}_{modality}.tsv")
        for modality in MODALITIES} for domain in domains}
    return interactions, embeddings


def resolve_data_paths(cfg: ExperimentConfig) -> ExperimentConfig:
    """Point an all-defaults config at the synth outputs in its out_dir."""
    if cfg.interactions or cfg.embeddings:
        return cfg
    if cfg.synth is None:
        raise ConfigError("config names no interaction file and has no "
                          "synth section to generate one")
    interactions, embeddings = synth_paths(cfg.out_dir, cfg.synth.domains)
    return replace(cfg, interactions=interactions, embeddings=embeddings)


@dataclass
class MaskSpec:
    modality: str
    ratio: float
    seed: int


def mask_seed(cfg_seed: int, modality: str, ratio: float) -> int:
    """Stable per-(modality, ratio) masking seed derived from the run seed."""
    idx = MODALITIES.index(modality)
    ss = np.random.SeedSequence([cfg_seed, 5, idx, int(round(ratio * 100))])
    return int(ss.generate_state(1)[0])


def load_experiment_data(cfg: ExperimentConfig,
                         mask: MaskSpec | None = None
                         ) -> tuple[list[Interaction], StoreSet]:
    """Load interactions plus the merged stores of all domains in play.

    A mask spec degrades the *target* domain's stores before merging, which
    is the robustness protocol: source-domain content (and hence
    pre-training) is never affected.
    """
    cfg.validate()
    interactions = load_interactions(cfg.interactions)
    domains = list(cfg.source_domains)
    if cfg.target_domain:
        domains.append(cfg.target_domain)
    per_domain: dict[str, StoreSet] = {}
    for domain in domains:
        if domain not in cfg.embeddings:
            raise ConfigError(f"no embedding paths configured for domain "
                              f"{domain!r}")
        paths = cfg.embeddings[domain]
        missing = set(MODALITIES) - set(paths)
        if missing:
            raise ConfigError(f"domain {domain!r} missing embedding paths for "
                              f"{sorted(missing)}")
        per_domain[domain] = StoreSet(
            **{m: load_embedding_store(paths[m]) for m in MODALITIES})
    if mask is not None:
        target = per_domain[cfg.target_domain]
        per_domain[cfg.target_domain] = ev.modality_mask(
            target, mask.modality, mask.ratio, mask.seed)
    merged = {m: merge_stores([per_domain[d].by_modality(m) for d in domains])
              for m in MODALITIES}
    return interactions, StoreSet(**merged)


# ---------------------------------------------------------------------------
# in-memory pipeline


@dataclass
class VariantRun:
    """Everything one variant run produces, kept in memory for analysis."""

    variant: VariantSpec
    pretrained: Checkpoint
    finetune_result: tr.FinetuneResult
    data: FinetuneData
    valid_report: MetricReport
    test_report: MetricReport
    test_ranks: np.ndarray
    test_targets: list[str]
    popularity_report: MetricReport


def make_pretrained(interactions, stores: StoreSet, source_domains,
                    cfg: tr.TrainingConfig, variant: VariantSpec) -> Checkpoint:
    """Pre-train (or random-init, for the no-pre-training variant)."""
    if not variant.pretrain:
        return tr.init_checkpoint(stores.dims, cfg, variant.plain)
    sequences = build_pretrain_sequences(interactions, list(source_domains),
                                         cfg.max_len)
    return tr.pretrain(tr.PretrainData(sequences, stores), cfg,
                       variant.plain).checkpoint


def run_variant(interactions, stores: StoreSet, source_domains, target_domain,
                cfg: tr.TrainingConfig, variant: VariantSpec,
                pretrained: Checkpoint | None = None,
                ks=(5, 10, 20)) -> VariantRun:
    """Fine-tune and evaluate one variant, pre-training first if needed."""
    if pretrained is None:
        pretrained = make_pretrained(interactions, stores, source_domains,
                                     cfg, variant)
    data = build_finetune_data(interactions, list(source_domains),
                               target_domain, stores)
    result = tr.finetune(pretrained, data, cfg, use_mix=variant.use_mix,
                         use_id=variant.use_id)
    scorer = tr.make_scorer(result.model, data, cfg)
    valid_instances = build_eval_instances(data, "valid", cfg.max_len)
    test_instances = build_eval_instances(data, "test", cfg.max_len)
    valid_report = ev.evaluate(valid_instances, scorer, data.item_index, ks)
    test_ranks = ev.ranks_from_scorer(test_instances, scorer, data.item_index)
    test_report = ev.report_from_ranks(test_ranks, ks)
    pop_report = ev.evaluate(test_instances, ev.popularity_scorer(data),
                             data.item_index, ks)
    return VariantRun(variant=variant, pretrained=pretrained,
                      finetune_result=result, data=data,
                      valid_report=valid_report, test_report=test_report,
                      test_ranks=test_ranks,
                      test_targets=[inst.target for inst in test_instances],
                      popularity_report=pop_report)


def ablation_run(interactions, stores: StoreSet, source_domains, target_domain,
                 cfg: tr.TrainingConfig, variant_name: str,
                 pretrained: Checkpoint | None = None,
                 ks=(5, 10, 20)) -> MetricReport:
    """Test metrics for one named variant under the shared protocol."""
    run = run_variant(interactions, stores, source_domains, target_domain,
                      cfg, variant_by_name(variant_name), pretrained, ks)
    return run.test_report


def pretrain_cache_key(variant: VariantSpec) -> tuple:
    """Variants sharing architecture and objective share a pre-trained model."""
    return (tuple(sorted(variant.plain)), variant.pretrain)


# ---------------------------------------------------------------------------
# file-level stage commands (used by the command-line interface)


def _write(path, text: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _curve_tsv(rows, echo: str) -> str:
    lines = [f"{int(x)}\t{y:.6f}" for x, y in rows]
    lines.append(f"config\t{echo}")
    return "\n".join(lines) + "\n"


def cmd_synth(cfg: ExperimentConfig) -> list[str]:
    """Write the synthetic corpus (interactions + per-domain stores) to out_dir."""
    if cfg.synth is None:
        raise ConfigError("synth command needs a synth section in the config")
    result = synth_generate(cfg.synth)
    interactions_path, embedding_paths = synth_paths(cfg.out_dir,
                                                     cfg.synth.domains)
    os.makedirs(cfg.out_dir, exist_ok=True)
    written = [interactions_path]
    write_interactions(interactions_path, result.interactions)
    for domain, stores in result.stores_by_domain.items():
        for modality in MODALITIES:
            path = embedding_paths[domain][modality]
            write_embedding_store(path, stores.by_modality(modality))
            written.append(path)
    echo_path = os.path.join(cfg.out_dir, "synth_config.json")
    _write(echo_path, cfg.echo() + "\n")
    written.append(echo_path)
    return written


def cmd_pretrain(cfg: ExperimentConfig) -> str:
    cfg = resolve_data_paths(cfg)
    if not cfg.source_domains:
        raise ConfigError("pretrain needs at least one source domain")
    interactions, stores = load_experiment_data(cfg)
    variant = variant_by_name(cfg.variant)
    tcfg = cfg.training_config()
    path = os.path.join(cfg.out_dir, PRETRAINED_NAME)
    os.makedirs(cfg.out_dir, exist_ok=True)
    if variant.pretrain:
        sequences = build_pretrain_sequences(
            interactions, list(cfg.source_domains), tcfg.max_len)
        result = tr.pretrain(tr.PretrainData(sequences, stores), tcfg,
                             variant.plain)
        ckpt = result.checkpoint
        _write(os.path.join(cfg.out_dir, "pretrain_curve.tsv"),
               _curve_tsv(enumerate(result.epoch_losses, start=1), cfg.echo()))
    else:
        ckpt = tr.init_checkpoint(stores.dims, tcfg, variant.plain)
    ckpt.meta["experiment"] = cfg.to_dict()
    save_checkpoint(path, ckpt)
    return path


def _require_checkpoint(cfg: ExperimentConfig, name: str) -> str:
    path = os.path.join(cfg.out_dir, name)
    if not os.path.exists(path):
        raise ConfigError(f"missing checkpoint {path}; run the earlier stage "
                          "first")
    return path


def cmd_finetune(cfg: ExperimentConfig, mask: MaskSpec | None = None,
                 out_suffix: str = "") -> str:
    cfg = resolve_data_paths(cfg)
    if not cfg.target_domain:
        raise ConfigError("finetune needs a target domain")
    ckpt_path = _require_checkpoint(cfg, PRETRAINED_NAME)
    interactions, stores = load_experiment_data(cfg, mask)
    variant = variant_by_name(cfg.variant)
    tcfg = cfg.training_config()
    data = build_finetune_data(interactions, list(cfg.source_domains),
                               cfg.target_domain, stores)
    result = tr.finetune(load_checkpoint(ckpt_path), data, tcfg,
                         use_mix=variant.use_mix, use_id=variant.use_id)
    result.checkpoint.meta["experiment"] = cfg.to_dict()
    out_path = os.path.join(cfg.out_dir, FINETUNED_NAME + out_suffix)
    save_checkpoint(out_path, result.checkpoint)
    _write(os.path.join(cfg.out_dir, f"valid_curve{out_suffix}.tsv"),
           _curve_tsv(result.curve, cfg.echo()))
    return out_path


def _evaluate_model(cfg: ExperimentConfig, ckpt_path: str,
                    mask: MaskSpec | None = None
                    ) -> tuple[MetricReport, ev.GroupReport]:
    interactions, stores = load_experiment_data(cfg, mask)
    model = tr.model_from_checkpoint(load_checkpoint(ckpt_path))
    data = build_finetune_data(interactions, list(cfg.source_domains),
                               cfg.target_domain, stores)
    if model.vocab != data.vocab:
        raise ConfigError("checkpoint vocabulary does not match the corpus; "
                          "was it fine-tuned on different data?")
    tcfg = cfg.training_config()
    instances = build_eval_instances(data, cfg.eval_mode, tcfg.max_len)
    scorer = tr.make_scorer(model, data, tcfg)
    ranks = ev.ranks_from_scorer(instances, scorer, data.item_index)
    report = ev.report_from_ranks(ranks, cfg.eval_ks)
    freqs = ev.train_frequencies(data)
    pop_ranks = ev.ranks_from_scorer(instances, ev.popularity_scorer(data),
                                     data.item_index)
    results = list(zip([inst.target for inst in instances], ranks))
    pop_results = list(zip([inst.target for inst in instances], pop_ranks))
    baseline = ev.popularity_group_report(pop_results, freqs, cfg.group_bounds,
                                          cfg.eval_ks).groups
    groups = ev.popularity_group_report(results, freqs, cfg.group_bounds,
                                        cfg.eval_ks, baseline=baseline)
    return report, groups


def _groups_tsv(groups: ev.GroupReport, echo: str) -> str:
    lines = []
    for label, report in sorted(groups.groups.items()):
        for k in sorted(report.recalls):
            lines.append(f"{label}\trecall@{k}\t{report.recalls[k]:.6f}")
        for k in sorted(report.ndcgs):
            lines.append(f"{label}\tndcg@{k}\t{report.ndcgs[k]:.6f}")
        lines.append(f"{label}\tusers\t{report.n_users}")
        for metric, ratio in sorted((groups.improvement or {})
                                    .get(label, {}).items()):
            lines.append(f"{label}\timprove_{metric}\t{ratio:.6f}")
    lines.append(f"config\t{echo}")
    return "\n".join(lines) + "\n"


def cmd_evaluate(cfg: ExperimentConfig) -> str:
    cfg = resolve_data_paths(cfg)
    ckpt_path = _require_checkpoint(cfg, FINETUNED_NAME)
    report, groups = _evaluate_model(cfg, ckpt_path)
    out_path = os.path.join(cfg.out_dir, f"metrics_{cfg.eval_mode}.tsv")
    _write(out_path, report.to_tsv(config_echo=cfg.echo()))
    _write(os.path.join(cfg.out_dir, f"metrics_{cfg.eval_mode}_groups.tsv"),
           _groups_tsv(groups, cfg.echo()))
    return out_path


def cmd_robustness(cfg: ExperimentConfig) -> list[str]:
    """Re-fine-tune and evaluate under each masking condition.

    The pre-trained checkpoint is reused across conditions (masking touches
    only target-domain content); each condition fine-tunes and evaluates
    with the same degraded stores, producing one report per
    (modality, ratio) pair.
    """
    cfg = resolve_data_paths(cfg)
    _require_checkpoint(cfg, PRETRAINED_NAME)
    written = []
    for modality in ROBUSTNESS_MODALITIES:
        for ratio in ROBUSTNESS_RATIOS:
            mask = MaskSpec(modality=modality, ratio=ratio,
                            seed=mask_seed(cfg.seed, modality, ratio))
            suffix = f"_{modality}_{ratio}"
            ckpt_path = cmd_finetune(cfg, mask=mask, out_suffix=suffix)
            report, _ = _evaluate_model(cfg, ckpt_path, mask=mask)
            out_path = os.path.join(cfg.out_dir,
                                    f"robustness_{modality}_{ratio}.tsv")
            _write(out_path, report.to_tsv(config_echo=cfg.echo()))
            written.append(out_path)
    return written


def cmd_ablate(cfg: ExperimentConfig, variants=None) -> list[str]:
    """Run the variant study, sharing pre-trained checkpoints where valid."""
    cfg = resolve_data_paths(cfg)
    names = list(variants) if variants else list(ev.VARIANTS)
    for name in names:
        variant_by_name(name)
    interactions, stores = load_experiment_data(cfg)
    tcfg = cfg.training_config()
    cache: dict[tuple, Checkpoint] = {}
    written = []
    summary_lines = []
    os.makedirs(cfg.out_dir, exist_ok=True)
    for name in names:
        variant = variant_by_name(name)
        key = pretrain_cache_key(variant)
        if key not in cache:
            cache[key] = make_pretrained(interactions, stores,
                                         cfg.source_domains, tcfg, variant)
        run = run_variant(interactions, stores, cfg.source_domains,
                          cfg.target_domain, tcfg, variant,
                          pretrained=cache[key], ks=cfg.eval_ks)
        out_path = os.path.join(cfg.out_dir, f"ablation_{name}.tsv")
        _write(out_path, run.test_report.to_tsv(config_echo=cfg.echo()))
        written.append(out_path)
        for k in sorted(run.test_report.ndcgs):
            summary_lines.append(
                f"{name}\tndcg@{k}\t{run.test_report.ndcgs[k]:.6f}")
    summary_lines.append(f"config\t{cfg.echo()}")
    summary_path = os.path.join(cfg.out_dir, "ablation_summary.tsv")
    _write(summary_path, "\n".join(summary_lines) + "\n")
    written.append(summary_path)
    return written
