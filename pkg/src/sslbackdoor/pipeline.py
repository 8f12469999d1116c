"""Config-driven pipeline: pretrain -> attack -> downstream -> evaluate ->
defend, with an artifact manifest, digest-based skipping, and table export.

Every stage rebuilds its inputs deterministically from the config (datasets
are regenerated, not cached), writes its artifacts under the output
directory, and records them in manifest.json together with its stage
digest. A stage is skipped when its digest and artifacts are already in
place, so reruns are no-ops unless the config (or an upstream stage)
changed or --force is given.
"""

from __future__ import annotations

import json
import os
import shutil
from dataclasses import dataclass

import numpy as np

from . import defenses
from .attack import (
    AttackConfig,
    AttackSpec,
    ReferenceSet,
    TargetPair,
    inject_backdoor,
    write_loss_log,
)
from .config import ExperimentConfig, config_digest, stage_digest
from .data import (
    AugmentationConfig,
    LabeledDataset,
    ShadowDataset,
    load_cifar10_binary,
    load_trigger,
    make_synthetic_dataset,
    sample_shadow,
    square_trigger,
)
from .downstream import load_classifier, save_classifier, train_multishot, extract_features
from .encoder import load_encoder, save_encoder
from .evaluation import (
    accuracy_counts,
    attack_success_counts,
    compile_report,
    similarity_cdf,
)
from .pretrain import SimCLRConfig, pretrain_simclr
from .seeding import derive_seed

STAGES = ("pretrain", "attack", "downstream", "evaluate", "defend")
STAGE_DEPS = {
    "pretrain": (),
    "attack": ("pretrain",),
    "downstream": ("pretrain", "attack"),
    "evaluate": ("downstream",),
    "defend": ("downstream",),
}


class StageDependencyError(RuntimeError):
    """Raised when a stage runs before the stages it depends on."""


@dataclass
class PipelineData:
    """Deterministic data splits derived from the config."""

    pretrain_pool: ShadowDataset
    shadow: ShadowDataset
    downstream_train: LabeledDataset
    downstream_test: LabeledDataset
    references: dict[int, np.ndarray]  # pair index -> (r, h, w, 3)
    pretraining_label: str


def build_target_pairs(cfg: ExperimentConfig, references: dict[int, np.ndarray]) -> list[TargetPair]:
    pairs = []
    for i, spec in enumerate(cfg.attack.triggers):
        if spec.file is not None:
            trigger = load_trigger(spec.file)
        else:
            trigger = square_trigger(
                cfg.dataset.image_size,
                size=spec.size,
                corner=spec.corner,
                color=tuple(spec.color),
                name=f"{spec.corner}-{spec.size}px",
            )
        pairs.append(
            TargetPair(
                task_id=f"pair{i}-class{spec.target_class}",
                target_class=spec.target_class,
                trigger=trigger,
                references=ReferenceSet(references[i]),
            )
        )
    return pairs


def materialize_data(cfg: ExperimentConfig) -> PipelineData:
    d = cfg.dataset
    if d.kind == "synthetic":
        master = make_synthetic_dataset(
            d.num_classes, d.per_class, d.image_size, derive_seed(cfg.seed, "dataset")
        )
        need = d.pretrain_size + d.downstream_train_size + d.downstream_test_size
        if need > len(master):
            raise ValueError(
                f"splits need {need} images but the synthetic dataset has {len(master)}"
            )
        order = np.random.default_rng(derive_seed(cfg.seed, "splits")).permutation(len(master))
        pre_idx = order[: d.pretrain_size]
        tr_idx = order[d.pretrain_size: d.pretrain_size + d.downstream_train_size]
        te_idx = order[
            d.pretrain_size + d.downstream_train_size: d.pretrain_size
            + d.downstream_train_size
            + d.downstream_test_size
        ]
        pretrain_pool = ShadowDataset(master.images[pre_idx])
        downstream_train = master.subset(tr_idx)
        downstream_test = master.subset(te_idx)
        # References imitate attacker-collected target-class images: drawn
        # from the same generator family but disjoint from every split.
        ref_pool = make_synthetic_dataset(
            d.num_classes,
            max(t.reference_count for t in cfg.attack.triggers) + 8,
            d.image_size,
            derive_seed(cfg.seed, "references"),
        )
        label = f"synthetic-{d.num_classes}c{d.image_size}"
    else:
        train = load_cifar10_binary(d.path)
        test = load_cifar10_binary(d.test_path)
        order = np.random.default_rng(derive_seed(cfg.seed, "splits")).permutation(len(train))
        pretrain_pool = ShadowDataset(train.images[order[: d.pretrain_size]])
        t_order = np.random.default_rng(derive_seed(cfg.seed, "test-splits")).permutation(len(test))
        downstream_train = test.subset(t_order[: d.downstream_train_size])
        downstream_test = test.subset(
            t_order[d.downstream_train_size: d.downstream_train_size + d.downstream_test_size]
        )
        ref_pool = train  # labeled source outside the downstream data
        label = os.path.basename(os.path.normpath(d.path))

    shadow = sample_shadow(pretrain_pool, min(d.shadow_size, len(pretrain_pool)),
                           derive_seed(cfg.seed, "shadow"))

    references: dict[int, np.ndarray] = {}
    ref_rng = np.random.default_rng(derive_seed(cfg.seed, "reference-choice"))
    for i, spec in enumerate(cfg.attack.triggers):
        candidates = np.nonzero(ref_pool.labels == spec.target_class)[0]
        if len(candidates) < spec.reference_count:
            raise ValueError(f"not enough reference candidates for class {spec.target_class}")
        chosen = ref_rng.choice(candidates, size=spec.reference_count, replace=False)
        references[i] = ref_pool.images[chosen].copy()

    return PipelineData(
        pretrain_pool=pretrain_pool,
        shadow=shadow,
        downstream_train=downstream_train,
        downstream_test=downstream_test,
        references=references,
        pretraining_label=label,
    )


def _augmentation(cfg: ExperimentConfig) -> AugmentationConfig:
    a = cfg.augment
    return AugmentationConfig(
        crop_scale_range=tuple(a.crop_scale_range),
        flip_probability=a.flip_probability,
        color_jitter_strength=a.color_jitter_strength,
        blur_probability=a.blur_probability,
    )


# -- stage implementations ---------------------------------------------------

PATHS = {
    "encoder_clean": "checkpoints/encoder_clean.pt",
    "encoder_backdoored": "checkpoints/encoder_backdoored.pt",
    "classifier_clean": "checkpoints/classifier_clean.pt",
    "classifier_backdoored": "checkpoints/classifier_backdoored.pt",
    "pretrain_log": "logs/pretrain_loss.tsv",
    "attack_log": "logs/attack_loss.tsv",
    "metrics": "reports/metrics.json",
    "defense": "reports/defense.json",
}


def _stage_pretrain(cfg: ExperimentConfig, out: str, data: PipelineData) -> list[str]:
    p = cfg.pretrain
    sim_cfg = SimCLRConfig(
        temperature=p.temperature,
        batch_size=p.batch_size,
        epochs=p.epochs,
        learning_rate=p.learning_rate,
        seed=derive_seed(cfg.seed, "stage-pretrain"),
        architecture=p.architecture,
        feature_dim=p.feature_dim,
        latent_dim=p.latent_dim,
    )
    encoder, _head, history = pretrain_simclr(data.pretrain_pool, sim_cfg, _augmentation(cfg))
    enc_path = os.path.join(out, PATHS["encoder_clean"])
    save_encoder(encoder, enc_path, train_config={"simclr": sim_cfg.__dict__})
    log_path = os.path.join(out, PATHS["pretrain_log"])
    with open(log_path, "w") as fh:
        fh.write("epoch\tloss\n")
        for e, v in enumerate(history):
            fh.write(f"{e}\t{v!r}\n")
    return [PATHS["encoder_clean"], PATHS["pretrain_log"]]


def _stage_attack(cfg: ExperimentConfig, out: str, data: PipelineData) -> list[str]:
    clean = load_encoder(os.path.join(out, PATHS["encoder_clean"]))
    spec = AttackSpec(pairs=build_target_pairs(cfg, data.references), shadow=data.shadow)
    a = cfg.attack
    attack_cfg = AttackConfig(
        lambda1=a.lambda1,
        lambda2=a.lambda2,
        learning_rate=a.learning_rate,
        batch_size=a.batch_size,
        max_epoch=a.max_epoch,
        optimizer=a.optimizer,
        freeze_batchnorm=a.freeze_batchnorm,
        augment_references=a.augment_references,
        include_trigger_term=a.include_trigger_term,
        seed=derive_seed(cfg.seed, "stage-attack"),
    )
    backdoored, log = inject_backdoor(clean, spec, attack_cfg, augmentation=_augmentation(cfg))
    save_encoder(
        backdoored,
        os.path.join(out, PATHS["encoder_backdoored"]),
        train_config={"attack": {k: v for k, v in attack_cfg.__dict__.items()}},
    )
    write_loss_log(os.path.join(out, PATHS["attack_log"]), log)
    return [PATHS["encoder_backdoored"], PATHS["attack_log"]]


def _stage_downstream(cfg: ExperimentConfig, out: str, data: PipelineData) -> list[str]:
    ds = cfg.downstream
    artifacts = []
    for name, enc_key in (("classifier_clean", "encoder_clean"),
                          ("classifier_backdoored", "encoder_backdoored")):
        enc = load_encoder(os.path.join(out, PATHS[enc_key]))
        feats, labels = extract_features(enc, data.downstream_train)
        clf, _history = train_multishot(
            feats,
            labels,
            epochs=ds.epochs,
            lr=ds.learning_rate,
            seed=derive_seed(cfg.seed, "stage-downstream"),
            num_classes=data.downstream_train.num_classes,
            hidden=tuple(ds.hidden_sizes),
            batch_size=ds.batch_size,
        )
        save_classifier(clf, os.path.join(out, PATHS[name]))
        artifacts.append(PATHS[name])
    return artifacts


def _cdf_path(pair_id: str, which: str) -> str:
    return f"reports/similarity_cdf_{which}_{pair_id}.tsv"


def _write_cdf(path: str, values: np.ndarray) -> None:
    n = len(values)
    with open(path, "w") as fh:
        fh.write("cosine_similarity\tcumulative_fraction\n")
        for k, v in enumerate(values):
            fh.write(f"{v!r}\t{(k + 1) / n!r}\n")


def _stage_evaluate(cfg: ExperimentConfig, out: str, data: PipelineData) -> list[str]:
    enc_clean = load_encoder(os.path.join(out, PATHS["encoder_clean"]))
    enc_bd = load_encoder(os.path.join(out, PATHS["encoder_backdoored"]))
    clf_clean = load_classifier(os.path.join(out, PATHS["classifier_clean"]))
    clf_bd = load_classifier(os.path.join(out, PATHS["classifier_backdoored"]))
    digest = config_digest(cfg)
    pairs = build_target_pairs(cfg, data.references)

    ca = accuracy_counts(clf_clean, enc_clean, data.downstream_test)
    ba = accuracy_counts(clf_bd, enc_bd, data.downstream_test)

    artifacts = []
    reports = []
    for pair in pairs:
        asr = attack_success_counts(
            clf_bd, enc_bd, data.downstream_test, pair.trigger, pair.target_class
        )
        asr_b = attack_success_counts(
            clf_clean, enc_clean, data.downstream_test, pair.trigger, pair.target_class
        )
        report = compile_report(
            experiment_id=f"{cfg.experiment_id}:{pair.task_id}",
            config_digest=digest,
            ca=ca,
            ba=ba,
            asr=asr,
            asr_b=asr_b,
        )
        reports.append(
            {
                **json.loads(report.to_json()),
                "pretraining_dataset": data.pretraining_label,
                "target_task": pair.task_id,
                "target_class": pair.target_class,
            }
        )
        reference = pair.references.images[0]
        for which, enc in (("clean", enc_clean), ("backdoored", enc_bd)):
            rel = _cdf_path(pair.task_id, which)
            _write_cdf(
                os.path.join(out, rel),
                similarity_cdf(enc, reference, data.downstream_test, pair.trigger),
            )
            artifacts.append(rel)

    with open(os.path.join(out, PATHS["metrics"]), "w") as fh:
        json.dump(reports, fh, indent=1, sort_keys=True)
    return [PATHS["metrics"]] + artifacts


def _stage_defend(cfg: ExperimentConfig, out: str, data: PipelineData) -> list[str]:
    enc_clean = load_encoder(os.path.join(out, PATHS["encoder_clean"]))
    enc_bd = load_encoder(os.path.join(out, PATHS["encoder_backdoored"]))
    clf_clean = load_classifier(os.path.join(out, PATHS["classifier_clean"]))
    clf_bd = load_classifier(os.path.join(out, PATHS["classifier_backdoored"]))
    nc = cfg.defense.neural_cleanse
    num_classes = data.downstream_test.num_classes

    norms = []
    for target in range(num_classes):
        reversed_trigger = defenses.reverse_engineer_trigger(
            clf_bd,
            enc_bd,
            target,
            data.downstream_test,
            steps=nc.steps,
            sparsity_weight=nc.sparsity_weight,
            learning_rate=nc.learning_rate,
            batch_size=nc.batch_size,
            seed=derive_seed(cfg.seed, "stage-defend", "nc", target),
        )
        norms.append(reversed_trigger.l1_norm)
    if num_classes >= 3:
        index = defenses.anomaly_index(norms)
    else:  # the outlier statistic is undefined below 3 classes
        index = defenses.AnomalyIndex(value=float("nan"), degenerate=True)

    mn = cfg.defense.mntd
    shadow_seed = derive_seed(cfg.seed, "stage-defend", "mntd-shadows")
    clean_pop = defenses.jumbo_classifier_population(
        enc_clean, data.downstream_train, mn.shadow_per_class, backdoored=False,
        seed=shadow_seed, epochs=mn.shadow_epochs,
    )
    bd_pop = defenses.jumbo_classifier_population(
        enc_clean, data.downstream_train, mn.shadow_per_class, backdoored=True,
        seed=shadow_seed, epochs=mn.shadow_epochs,
    )
    meta = defenses.mntd_train(
        clean_pop,
        bd_pop,
        query_count=mn.query_count,
        epochs=mn.epochs,
        seed=derive_seed(cfg.seed, "stage-defend", "mntd-meta"),
        image_size=cfg.dataset.image_size,
    )
    train_scores = [defenses.mntd_score(meta, h) for h in clean_pop + bd_pop]
    train_labels = [0] * len(clean_pop) + [1] * len(bd_pop)
    train_acc = sum(
        (s >= 0.5) == bool(lab) for s, lab in zip(train_scores, train_labels)
    ) / len(train_scores)

    score_clean = defenses.mntd_score(meta, defenses.make_handle(clf_clean, enc_clean))
    score_bd = defenses.mntd_score(meta, defenses.make_handle(clf_bd, enc_bd))

    payload = {
        "neural_cleanse": {
            "per_class_l1_norms": norms,
            "anomaly_index": None if index.degenerate else index.value,
            "degenerate": index.degenerate,
            "flagged_backdoored": (not index.degenerate) and index.value > 2.0,
            "steps": nc.steps,
            "sparsity_weight": nc.sparsity_weight,
        },
        "mntd": {
            "shadow_per_class": mn.shadow_per_class,
            "train_accuracy": train_acc,
            "score_clean_pipeline": score_clean,
            "score_backdoored_pipeline": score_bd,
            "verdict_clean": score_clean >= 0.5,
            "verdict_backdoored": score_bd >= 0.5,
        },
    }
    with open(os.path.join(out, PATHS["defense"]), "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
    return [PATHS["defense"]]


_STAGE_FUNCS = {
    "pretrain": _stage_pretrain,
    "attack": _stage_attack,
    "downstream": _stage_downstream,
    "evaluate": _stage_evaluate,
    "defend": _stage_defend,
}


# -- manifest and orchestration ----------------------------------------------


def manifest_path(out: str) -> str:
    return os.path.join(out, "manifest.json")


def load_manifest(out: str) -> dict:
    path = manifest_path(out)
    if not os.path.exists(path):
        return {"experiment_id": None, "config_digest": None, "stages": {}}
    with open(path) as fh:
        return json.load(fh)


def _save_manifest(out: str, manifest: dict) -> None:
    with open(manifest_path(out), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def expected_digests(cfg: ExperimentConfig) -> dict[str, str]:
    """Per-stage digests implied by the config, chained along dependencies."""
    digests: dict[str, str] = {}
    for stage in STAGES:
        upstream = [digests[d] for d in STAGE_DEPS[stage]]
        digests[stage] = stage_digest(cfg, stage, upstream)
    return digests


def _stage_satisfied(manifest: dict, out: str, stage: str, digest: str) -> bool:
    entry = manifest["stages"].get(stage)
    return (
        entry is not None
        and entry["digest"] == digest
        and all(os.path.exists(os.path.join(out, rel)) for rel in entry["artifacts"])
    )


def _version_aside(manifest: dict, out: str, stage: str) -> None:
    """Move a re-run stage's previous artifacts to versioned sibling names.

    Written artifacts are never modified in place; the canonical name always
    holds the current version and superseded files stay on disk, recorded in
    the manifest.
    """
    entry = manifest["stages"].get(stage)
    if entry is None:
        return
    for rel in entry["artifacts"]:
        path = os.path.join(out, rel)
        if not os.path.exists(path):
            continue
        root, ext = os.path.splitext(rel)
        n = 1
        while os.path.exists(os.path.join(out, f"{root}.v{n}{ext}")):
            n += 1
        sibling = f"{root}.v{n}{ext}"
        os.replace(path, os.path.join(out, sibling))
        manifest.setdefault("superseded", []).append(sibling)


def run_pipeline(
    cfg: ExperimentConfig,
    stages: list[str] | tuple[str, ...],
    out_dir: str | None = None,
    force: bool = False,
) -> dict:
    """Run the requested stages in canonical order; returns the manifest."""
    for s in stages:
        if s not in STAGES:
            raise ValueError(f"unknown stage {s!r}; known stages: {STAGES}")
    out = out_dir or cfg.output_dir
    if not out:
        raise ValueError("no output directory: set output_dir in the config or pass --out")
    os.makedirs(out, exist_ok=True)
    for sub in ("checkpoints", "logs", "reports", "tables"):
        os.makedirs(os.path.join(out, sub), exist_ok=True)

    manifest = load_manifest(out)
    manifest["experiment_id"] = cfg.experiment_id
    manifest["config_digest"] = config_digest(cfg)

    requested = [s for s in STAGES if s in set(stages)]
    digests = expected_digests(cfg)
    data = materialize_data(cfg)

    for stage in requested:
        for dep in STAGE_DEPS[stage]:
            if not _stage_satisfied(manifest, out, dep, digests[dep]):
                raise StageDependencyError(
                    f"stage {stage!r} requires {dep!r} to have run with the current config"
                )
        if _stage_satisfied(manifest, out, stage, digests[stage]) and not force:
            continue
        _version_aside(manifest, out, stage)
        artifacts = _STAGE_FUNCS[stage](cfg, out, data)
        manifest["stages"][stage] = {"digest": digests[stage], "artifacts": artifacts}
        _save_manifest(out, manifest)

    _save_manifest(out, manifest)
    return manifest


def find_orphans(out: str) -> list[str]:
    """Files under the managed subdirectories not reachable from the manifest."""
    manifest = load_manifest(out)
    known = set(manifest.get("superseded", []))
    for entry in manifest["stages"].values():
        known.update(entry["artifacts"])
    orphans = []
    for sub in ("checkpoints", "logs", "reports"):
        root = os.path.join(out, sub)
        if not os.path.isdir(root):
            continue
        for dirpath, _dirs, files in os.walk(root):
            for f in files:
                rel = os.path.relpath(os.path.join(dirpath, f), out)
                if rel not in known:
                    orphans.append(rel)
    return sorted(orphans)


# -- tables --------------------------------------------------------------------


def emit_tables(out_dirs: list[str] | str) -> dict[str, str]:
    """Render metric tables from one or more experiment directories.

    Writes tables/summary.tsv and tables/summary.txt under the first
    directory, copies CDF data files alongside them, and returns the table
    texts keyed by file name.
    """
    if isinstance(out_dirs, (str, os.PathLike)):
        out_dirs = [out_dirs]
    rows = []
    cdf_sources = []
    for out in out_dirs:
        manifest = load_manifest(out)
        if not manifest["stages"]:
            raise StageDependencyError(f"no completed stages recorded under {out}")
        metrics_file = os.path.join(out, PATHS["metrics"])
        if not os.path.exists(metrics_file):
            raise StageDependencyError(f"no metrics report under {out}; run the evaluate stage")
        with open(metrics_file) as fh:
            for rec in json.load(fh):
                rows.append(rec)
        for entry in manifest["stages"].get("evaluate", {"artifacts": []})["artifacts"]:
            if "similarity_cdf" in entry:
                cdf_sources.append(os.path.join(out, entry))

    ids = [r["experiment_id"] for r in rows]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise ValueError(f"duplicate experiment ids: {dupes}")

    tsv_lines = ["experiment_id\tpretraining_dataset\ttarget_task\tasr_b\tasr\tca\tba"]
    for r in rows:
        tsv_lines.append(
            f"{r['experiment_id']}\t{r['pretraining_dataset']}\t{r['target_task']}\t"
            f"{r['asr_b']!r}\t{r['asr']!r}\t{r['ca']!r}\t{r['ba']!r}"
        )
    tsv = "\n".join(tsv_lines) + "\n"

    def pct(x: float) -> str:
        return f"{100.0 * x:6.2f}"

    txt_lines = ["Attack success rates", "-" * 72]
    txt_lines.append(f"{'pretraining':<18}{'target task':<22}{'ASR-B (%)':>12}{'ASR (%)':>12}")
    for r in rows:
        txt_lines.append(
            f"{r['pretraining_dataset']:<18}{r['target_task']:<22}"
            f"{pct(r['asr_b']):>12}{pct(r['asr']):>12}"
        )
    txt_lines += ["", "Accuracy preservation", "-" * 72]
    txt_lines.append(f"{'experiment':<34}{'CA (%)':>12}{'BA (%)':>12}")
    for r in rows:
        txt_lines.append(f"{r['experiment_id']:<34}{pct(r['ca']):>12}{pct(r['ba']):>12}")
    txt = "\n".join(txt_lines) + "\n"

    tables_dir = os.path.join(out_dirs[0], "tables")
    os.makedirs(tables_dir, exist_ok=True)
    with open(os.path.join(tables_dir, "summary.tsv"), "w") as fh:
        fh.write(tsv)
    with open(os.path.join(tables_dir, "summary.txt"), "w") as fh:
        fh.write(txt)
    for src in cdf_sources:
        shutil.copyfile(src, os.path.join(tables_dir, os.path.basename(src)))

    return {"summary.tsv": tsv, "summary.txt": txt}
