"""Experiment stages and the composite commands built from them.

Every stage reads its inputs from and writes its outputs to one run
directory, so the CLI can run stages one at a time or chained. All
randomness is derived from ``cfg.seed`` with :func:`stage_seed`, which makes
every artifact except ``manifest.json`` a pure function of the config.

Run directory layout::

    config.txt  net.ssnet  target.json  summary.csv  manifest.json
    eps_<tag>/outcomes.bin  outcomes.csv  asr.json
    eps_<tag>/features_<mode>.npz  detector_<mode>_<kind>.ssdet
    eps_<tag>/report_<mode>_<kind>.json  report_<mode>_<kind>.csv
"""

from __future__ import annotations

import csv
import io
import json
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from ..attacks import AttackBudget, read_outcomes, run_attack, standard_cascade, write_outcomes
from ..data import (DetectionDataset, LabeledImages, build_detection_dataset, load_cifar10_binary,
                    split_labeled, synth_dataset)
from ..detectors import ForestHyper, LogRegHyper, load_detector, save_detector, train_detector
from ..errors import ConfigError, DataError, FreqDetectError
from ..metrics import compute_asr, confusion, evaluate_detector, f1_score, pct
from ..smallnet import Network, default_architecture, net_train
from ..spectral import diff_heatmaps, normalized_cross_correlation, write_pgm
from .config import epsilon_tag, format_config, parse_epsilon, stage_seed

INCOMPLETE = "INCOMPLETE"


class StageError(FreqDetectError):
    """A pipeline stage failed; ``cause`` keeps the original exception."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class Run:
    """A run directory plus the manifest of stage timings."""

    def __init__(self, cfg, out=None):
        self.cfg = cfg
        self.root = Path(out or cfg.out)
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest = {"stages": []}

    def eps_dir(self, eps_text):
        d = self.root / f"eps_{epsilon_tag(eps_text)}"
        d.mkdir(exist_ok=True)
        return d

    def need(self, path):
        path = self.root / path
        if not path.exists():
            raise DataError(f"missing {path}; run the earlier stage first")
        return path

    @contextmanager
    def stage(self, name):
        started = time.time()
        marker = self.root / INCOMPLETE
        try:
            yield
        except Exception as exc:
            marker.write_text(f"stage: {name}\ncause: {type(exc).__name__}: {exc}\n")
            self.manifest["stages"].append({"stage": name, "started": started,
                                            "failed": time.time()})
            self.write_manifest()
            if isinstance(exc, StageError):
                raise
            raise StageError(name, exc) from exc
        self.manifest["stages"].append({"stage": name, "started": started, "finished": time.time()})

    def write_manifest(self):
        # the only file allowed to hold wall-clock times
        (self.root / "manifest.json").write_text(json.dumps(self.manifest, indent=2) + "\n")

    def finish(self):
        marker = self.root / INCOMPLETE
        if marker.exists():
            marker.unlink()
        self.write_manifest()


def write_config(run):
    # the output path is left out so identical experiments in different
    # directories produce identical files
    text = format_config(run.cfg)
    lines = [line for line in text.splitlines() if not line.startswith("out =")]
    (run.root / "config.txt").write_text("\n".join(lines) + "\n")


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    Path(path).write_text(buf.getvalue())


# -- data and target net ----------------------------------------------------------

def _concat(parts):
    return LabeledImages(np.concatenate([p.images for p in parts]),
                         np.concatenate([p.labels for p in parts]), parts[0].class_count)


def prepare_data(cfg):
    """``(train, test)`` image sets for the target network."""
    if cfg.dataset == "cifar":
        if not (cfg.cifar_train and cfg.cifar_test):
            raise ConfigError("dataset=cifar needs cifar_train and cifar_test paths")
        train = _concat([load_cifar10_binary(p) for p in cfg.cifar_train])
        test = _concat([load_cifar10_binary(p) for p in cfg.cifar_test])
        return train, test
    full = synth_dataset(cfg.synth_classes, cfg.synth_per_class, cfg.synth_size,
                         seed=stage_seed(cfg.seed, "data"))
    return split_labeled(full, cfg.net_test_fraction, stage_seed(cfg.seed, "split"))


def architecture_for(cfg):
    if cfg.dataset == "cifar":
        return default_architecture(10, (3, 32, 32))
    return default_architecture(cfg.synth_classes, (3, cfg.synth_size, cfg.synth_size))


def train_target(run):
    """Train the target network; writes ``net.ssnet`` and ``target.json``."""
    cfg = run.cfg
    with run.stage("train-target"):
        train, test = prepare_data(cfg)
        net = Network.initialize(architecture_for(cfg), stage_seed(cfg.seed, "init"))
        net = net_train(net, train, cfg.net_epochs, cfg.net_lr, stage_seed(cfg.seed, "train"),
                        cfg.net_batch)
        net.save(run.root / "net.ssnet")
        report = {"train_accuracy": net.accuracy(train.images, train.labels),
                  "test_accuracy": net.accuracy(test.images, test.labels),
                  "loss_history": list(net.loss_history),
                  "train_size": len(train), "test_size": len(test),
                  "parameters": net.arch.param_count()}
        _dump_json(run.root / "target.json", report)
    return net, report


def load_target(run):
    return Network.load(run.need("net.ssnet"))


def attack_pool(cfg, net, test):
    """Correctly classified test samples, capped at ``max_attack_samples`` by a seeded draw.

    Returns test-set indices in increasing order; they double as sample ids.
    """
    preds = np.concatenate([net.predict(test.images[i:i + 256]) for i in range(0, len(test), 256)])
    correct = np.nonzero(preds == test.labels)[0]
    if correct.size == 0:
        raise DataError("the target network misclassifies every test sample")
    if correct.size > cfg.max_attack_samples:
        rng = np.random.default_rng(stage_seed(cfg.seed, "pool"))
        correct = np.sort(rng.choice(correct, size=cfg.max_attack_samples, replace=False))
    return correct


def budgets(cfg, eps_text):
    eps = parse_epsilon(eps_text)
    out = {}
    for name in ("pgd", "fgsm", "square"):
        seed = stage_seed(cfg.seed, f"attack:{name}:{eps_text}")
        if name == "pgd":
            out[name] = AttackBudget(eps, cfg.pgd_steps, cfg.pgd_step_fraction * eps, seed,
                                     cfg.pgd_random_start)
        elif name == "square":
            out[name] = AttackBudget(eps, cfg.square_steps, None, seed)
        else:
            out[name] = AttackBudget(eps, 1, eps, seed, False)
    return out


# -- attacks --------------------------------------------------------------------------

def _asr_record(outcomes):
    by_attack = {}
    for o in outcomes:
        if o.success:
            by_attack[o.attack_name] = by_attack.get(o.attack_name, 0) + 1
    return {"asr": compute_asr(outcomes), "attacked": len(outcomes),
            "successes": sum(o.success for o in outcomes), "by_attack": by_attack}


def run_attacks(run, net=None):
    """Standard-mode cascade at every epsilon; writes outcomes and ``asr.json``."""
    cfg = run.cfg
    with run.stage("attack"):
        net = net or load_target(run)
        _, test = prepare_data(cfg)
        pool = attack_pool(cfg, net, test)
        for eps_text in cfg.epsilon:
            b = budgets(cfg, eps_text)
            outcomes = standard_cascade(net, test.images[pool], test.labels[pool], list(cfg.attack),
                                        {a: b[a] for a in cfg.attack}, pool)
            d = run.eps_dir(eps_text)
            write_outcomes(d / "outcomes.bin", d / "outcomes.csv", outcomes, b["pgd"].epsilon,
                           cfg.pgd_steps, cfg.seed)
            _dump_json(d / "asr.json", _asr_record(outcomes))


# -- features, detectors, evaluation ---------------------------------------------

def _layers_for(cfg, mode):
    return tuple(cfg.layer) if mode == "white" else ()


def build_features(run, net=None):
    cfg = run.cfg
    with run.stage("features"):
        net = net or load_target(run)
        _, test = prepare_data(cfg)
        for eps_text in cfg.epsilon:
            d = run.eps_dir(eps_text)
            outcomes, _ = read_outcomes(run.need(d.relative_to(run.root) / "outcomes.bin"))
            seed = stage_seed(cfg.seed, f"features:{eps_text}")
            for mode in cfg.mode:
                ds = build_detection_dataset(test.images, outcomes, net, mode, _layers_for(cfg, mode),
                                             seed, cfg.quantize_8bit, cfg.log_scale,
                                             clean_ids=np.arange(len(test)))
                ds.save(d / f"features_{mode}.npz")


def _hypers(cfg):
    return (LogRegHyper(cfg.lr_l2, cfg.lr_iterations, cfg.lr_rate),
            ForestHyper(n_trees=cfg.rf_trees))


def train_detectors(run):
    cfg = run.cfg
    lr_hyper, rf_hyper = _hypers(cfg)
    with run.stage("train-detector"):
        for eps_text in cfg.epsilon:
            d = run.eps_dir(eps_text)
            for mode in cfg.mode:
                ds = DetectionDataset.load(run.need(d.relative_to(run.root) / f"features_{mode}.npz"))
                X, y = ds.train()
                for kind in cfg.detector:
                    det = train_detector(kind, X, y, stage_seed(cfg.seed, f"detector:{eps_text}:{mode}:{kind}"),
                                         lr_hyper, rf_hyper)
                    save_detector(d / f"detector_{mode}_{kind}.ssdet", det)


def summary_header(cfg):
    header = ["epsilon", "ASR"]
    for mode in cfg.mode:
        for kind in cfg.detector:
            header += [f"{mode}_{kind}_{m}" for m in ("F1", "FNR", "ASRD")]
    return header


def evaluate(run):
    """Per-configuration reports and the top-level ``summary.csv``."""
    cfg = run.cfg
    rows = []
    with run.stage("evaluate"):
        for eps_text in cfg.epsilon:
            d = run.eps_dir(eps_text)
            rel = d.relative_to(run.root)
            asr = json.loads(run.need(rel / "asr.json").read_text())["asr"]
            row = [eps_text, pct(asr)]
            for mode in cfg.mode:
                ds = DetectionDataset.load(run.need(rel / f"features_{mode}.npz"))
                X, y = ds.test()
                for kind in cfg.detector:
                    det = load_detector(run.need(rel / f"detector_{mode}_{kind}.ssdet"))
                    conf = {"epsilon": eps_text, "mode": mode, "detector": kind, "seed": cfg.seed}
                    rep = evaluate_detector(det.predict_proba(X), y, asr, conf)
                    (d / f"report_{mode}_{kind}.json").write_text(rep.to_json())
                    (d / f"report_{mode}_{kind}.csv").write_text(rep.to_csv())
                    row += [pct(rep.f1), pct(rep.fnr), pct(rep.asrd)]
            rows.append(row)
        _write_csv(run.root / "summary.csv", summary_header(cfg), rows)
    return rows


def pipeline(run):
    """Standard-mode experiment: target, cascade, features, detectors, reports."""
    write_config(run)
    net, _ = train_target(run)
    run_attacks(run, net)
    build_features(run, net)
    train_detectors(run)
    rows = evaluate(run)
    run.finish()
    return rows


# -- individual mode, layer study, heatmaps ---------------------------------------

def _target_for(run):
    if (run.root / "net.ssnet").exists():
        return load_target(run)
    net, _ = train_target(run)
    return net


def individual_outcomes(cfg, net, test, pool, eps_text):
    """Each attack on every pooled sample (no hand-over between attacks)."""
    b = budgets(cfg, eps_text)
    return {a: run_attack(a, net, test.images[pool], test.labels[pool], b[a], pool) for a in cfg.attack}


def _detection_set(cfg, test, outcomes, net, mode, layers, seed, attack):
    ds = build_detection_dataset(test.images, outcomes, net, mode, layers, seed, cfg.quantize_8bit,
                                 cfg.log_scale, clean_ids=np.arange(len(test)))
    for split in (ds.train(), ds.test()):
        if not (split[1] == 1).any():
            hits = sum(o.success for o in outcomes)
            raise DataError(f"attack '{attack}' has {hits} successful samples, too few to fill "
                            "both train and test splits")
    return ds


def _f1_on(det, X, y):
    tp, fp, _, fn = confusion(det.predict_proba(X), y)
    return f1_score(tp, fp, fn)


def individual(run):
    """Per-attack detectors, a Table-2 style F1 table, and cross-attack F1 matrices.

    Only the first epsilon is used. Matrix entry (A, B) is a detector trained
    on attack A's training split and scored on attack B's test split.
    """
    cfg = run.cfg
    write_config(run)
    lr_hyper, rf_hyper = _hypers(cfg)
    eps_text = cfg.epsilon[0]
    with run.stage("individual"):
        net = _target_for(run)
        _, test = prepare_data(cfg)
        pool = attack_pool(cfg, net, test)
        per_attack = individual_outcomes(cfg, net, test, pool, eps_text)
        d = run.root / "individual"
        d.mkdir(exist_ok=True)
        seed = stage_seed(cfg.seed, f"individual:{eps_text}")
        table = []
        for mode in cfg.mode:
            sets = {a: _detection_set(cfg, test, outs, net, mode, _layers_for(cfg, mode), seed, a)
                    for a, outs in per_attack.items()}
            for kind in cfg.detector:
                dets = {}
                for a, ds in sets.items():
                    dets[a] = train_detector(kind, *ds.train(),
                                             stage_seed(cfg.seed, f"individual:{mode}:{kind}:{a}"),
                                             lr_hyper, rf_hyper)
                    asr = compute_asr(per_attack[a])
                    conf = {"epsilon": eps_text, "mode": mode, "detector": kind, "attack": a,
                            "seed": cfg.seed}
                    rep = evaluate_detector(dets[a].predict_proba(ds.test()[0]), ds.test()[1], asr, conf)
                    (d / f"report_{a}_{mode}_{kind}.json").write_text(rep.to_json())
                    (d / f"report_{a}_{mode}_{kind}.csv").write_text(rep.to_csv())
                table.append([mode, kind] + [pct(_f1_on(dets[a], *sets[a].test())) for a in cfg.attack])
                matrix = [[a] + [pct(_f1_on(dets[a], *sets[b].test())) for b in cfg.attack]
                          for a in cfg.attack]
                _write_csv(d / f"cross_{mode}_{kind}.csv", ["train\\test"] + list(cfg.attack), matrix)
        _write_csv(d / "f1_table.csv", ["mode", "detector"] + list(cfg.attack), table)
        _dump_json(d / "asr.json", {a: _asr_record(o) for a, o in per_attack.items()})
    run.finish()
    return table


def layer_study(run):
    """White-box detectors on one layer at a time: layer, dimension, per-attack F1."""
    cfg = run.cfg
    write_config(run)
    lr_hyper, rf_hyper = _hypers(cfg)
    eps_text = cfg.epsilon[0]
    rows = []
    with run.stage("layer-study"):
        net = _target_for(run)
        layers = list(cfg.study_layer) or net.spatial_layers()
        shapes = dict(zip(net.layer_names, net.arch.shapes))
        for name in layers:
            if name not in shapes:
                raise ConfigError(f"layer '{name}' not in architecture {net.layer_names}")
            if len(shapes[name]) != 3:
                raise ConfigError(f"layer '{name}' has no 2D feature maps")
        _, test = prepare_data(cfg)
        pool = attack_pool(cfg, net, test)
        per_attack = individual_outcomes(cfg, net, test, pool, eps_text)
        seed = stage_seed(cfg.seed, f"layer-study:{eps_text}")
        for name in layers:
            sets = {a: _detection_set(cfg, test, outs, net, "white", (name,), seed, a)
                    for a, outs in per_attack.items()}
            for kind in cfg.detector:
                f1s = []
                for a, ds in sets.items():
                    det = train_detector(kind, *ds.train(),
                                         stage_seed(cfg.seed, f"layer-study:{name}:{kind}:{a}"),
                                         lr_hyper, rf_hyper)
                    f1s.append(pct(_f1_on(det, *ds.test())))
                rows.append([name, int(np.prod(shapes[name])), kind] + f1s)
        _write_csv(run.root / "layer_study.csv", ["layer", "dim", "detector"] + list(cfg.attack), rows)
    run.finish()
    return rows


def fig1(run):
    """Mean spatial and accumulated spectral difference maps per attack and channel.

    Writes ``fig1/<attack>_{spatial,spectral}_c<k>.pgm`` (with range sidecars)
    and ``fig1/ncc.json`` holding the pairwise normalized cross-correlation of
    the attacks' spectral maps.
    """
    cfg = run.cfg
    write_config(run)
    eps_text = cfg.epsilon[0]
    with run.stage("fig1"):
        net = _target_for(run)
        _, test = prepare_data(cfg)
        pool = attack_pool(cfg, net, test)
        per_attack = individual_outcomes(cfg, net, test, pool, eps_text)
        d = run.root / "fig1"
        d.mkdir(exist_ok=True)
        spectral = {}
        for a, outs in per_attack.items():
            hits = [o for o in outs if o.success]
            if not hits:
                raise DataError(f"attack '{a}' produced no successful perturbations at eps {eps_text}")
            spatial, spec = diff_heatmaps(np.stack([o.original for o in hits]),
                                          np.stack([o.adversarial for o in hits]))
            spectral[a] = spec
            for c in range(spec.shape[0]):
                write_pgm(d / f"{a}_spatial_c{c}.pgm", spatial[c])
                write_pgm(d / f"{a}_spectral_c{c}.pgm", spec[c])
        names = list(spectral)
        ncc = {f"{a}|{b}": normalized_cross_correlation(spectral[a], spectral[b])
               for i, a in enumerate(names) for b in names[i + 1:]}
        peak = {a: float(s.max() / s.mean()) if s.mean() > 0 else 0.0 for a, s in spectral.items()}
        _dump_json(d / "ncc.json", {"ncc": ncc, "max_over_mean": peak})
    run.finish()
    return ncc
