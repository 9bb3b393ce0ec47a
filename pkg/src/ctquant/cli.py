"""Command-line entry point.

Subcommands: extract, featurize, train, predict, explain, evaluate, phantom.
Every command writes a RunManifest JSON next to its primary output. Errors
map to stable nonzero exit codes (usage errors exit 2 via click).
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import logging
import os
import sys
import time
from importlib import metadata
from pathlib import Path

import click
import numpy as np

from . import biomarkers as bm
from . import features as ft
from . import fusion as fu
from . import phantom as ph
from . import training_eval as te
from . import volume_io as vio
from .errors import CtQuantError, MissingFile, NoPositives, TooFewRecords

log = logging.getLogger("ctquant.cli")


def _version():
    try:
        return metadata.version("ctquant")
    except metadata.PackageNotFoundError:
        return "0.0.0"


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(command, config, inputs, outputs, seed, started):
    """RunManifest JSON beside the first output (or cwd for pure reports)."""
    manifest = {
        "command": command,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs if Path(p).is_file()},
        "seed": seed,
        "tool_version": _version(),
        "duration_s": round(time.time() - started, 3),
        "outputs": [str(p) for p in outputs],
    }
    if outputs:
        target = Path(str(outputs[0]) + ".manifest.json")
    else:
        target = Path(f"{command}.manifest.json")
    target.write_text(json.dumps(manifest, indent=2) + "\n")
    return target


def _load_config(path):
    if path is None:
        return {}
    if not Path(path).is_file():
        raise MissingFile(f"config file {path} not found")
    return json.loads(Path(path).read_text())


def _fail(err: CtQuantError):
    click.echo(f"error: {err}", err=True)
    sys.exit(err.exit_code)


class _Command(click.Command):
    """Maps domain errors to their exit codes uniformly."""

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except CtQuantError as err:
            _fail(err)


@click.group()
def main():
    """CT biomarker extraction and fusion-based risk prediction."""
    level = os.environ.get("CTQUANT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING))


def _load_masks(paths):
    schemas = {"pericardium": vio.MaskSchema.PERICARDIUM,
               "calcium": vio.MaskSchema.CALCIUM,
               "aorta": vio.MaskSchema.AORTA,
               "lungs": vio.MaskSchema.LUNGS}
    return {name: (vio.load_mask(p, schemas[name]) if p else None)
            for name, p in paths.items()}


def _extract_one(scan):
    v = vio.load_volume(scan["volume"])
    masks = _load_masks({k: scan.get(k) for k in
                         ("pericardium", "calcium", "aorta", "lungs")})
    return bm.extract_all(v, **masks)


@main.command(cls=_Command)
@click.option("--volume", type=click.Path())
@click.option("--pericardium", type=click.Path())
@click.option("--calcium", type=click.Path())
@click.option("--aorta", type=click.Path())
@click.option("--lungs", type=click.Path())
@click.option("--scan-id", default="scan")
@click.option("--batch", type=click.Path(),
              help="JSON list of per-scan {scan_id, volume, <mask paths>}.")
@click.option("--jobs", type=int, default=1)
@click.option("--config", type=click.Path())
@click.option("--out", type=click.Path(), required=True)
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]),
              default="csv")
def extract(volume, pericardium, calcium, aorta, lungs, scan_id, batch, jobs,
            config, out, fmt):
    """Compute the 18 biomarkers for one scan or a batch manifest."""
    started = time.time()
    cfg = _load_config(config)
    if batch:
        scans = json.loads(Path(batch).read_text())
    else:
        if volume is None:
            raise MissingFile("either --volume or --batch is required")
        scans = [{"scan_id": scan_id, "volume": volume,
                  "pericardium": pericardium, "calcium": calcium,
                  "aorta": aorta, "lungs": lungs}]

    results = [None] * len(scans)
    failures = []
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, jobs)) as ex:
        futs = {ex.submit(_extract_one, s): i for i, s in enumerate(scans)}
        for fut in concurrent.futures.as_completed(futs):
            i = futs[fut]
            try:
                results[i] = fut.result()
            except CtQuantError as err:
                failures.append((scans[i]["scan_id"], err))
                results[i] = bm.BiomarkerVector()

    rows = [(s["scan_id"], r) for s, r in zip(scans, results)]
    if fmt == "csv":
        bm.write_csv(out, rows)
    else:
        Path(out).write_text(json.dumps(
            [{"scan_id": sid, **bv.to_json_dict()} for sid, bv in rows],
            indent=2) + "\n")

    inputs = [p for s in scans for p in s.values()
              if isinstance(p, str) and Path(p).is_file()]
    write_manifest("extract", cfg, inputs, [out], None, started)
    for sid, err in failures:
        click.echo(f"error: {sid}: {err}", err=True)
    if failures:
        sys.exit(failures[0][1].exit_code)


@main.command(cls=_Command)
@click.option("--volume", type=click.Path(), required=True)
@click.option("--pericardium", type=click.Path(), required=True)
@click.option("--biomarkers", "biomarkers_csv", type=click.Path(),
              help="Biomarker CSV from `extract` to merge into the record.")
@click.option("--scan-id", default="scan")
@click.option("--label", type=int)
@click.option("--config", type=click.Path())
@click.option("--out", type=click.Path(), required=True)
def featurize(volume, pericardium, biomarkers_csv, scan_id, label, config,
              out):
    """Deterministic stub deep-feature vector for one scan."""
    started = time.time()
    cfg = _load_config(config)
    v = vio.load_volume(volume)
    heart = vio.load_mask(pericardium, vio.MaskSchema.PERICARDIUM)
    x1 = ft.stub_featurize(v, heart)
    bv = bm.BiomarkerVector()
    if biomarkers_csv:
        table = dict(bm.read_csv(biomarkers_csv))
        if scan_id in table:
            bv = table[scan_id]
    record = ft.FeatureRecord(scan_id=scan_id, x1=x1, biomarkers=bv,
                              label=label)
    ft.export_features(out, [record])
    inputs = [volume, pericardium] + ([biomarkers_csv] if biomarkers_csv else [])
    write_manifest("featurize", cfg, inputs, [out], None, started)


def _labelled(records):
    missing = [r.scan_id for r in records if r.label is None]
    if missing:
        raise TooFewRecords(
            f"{len(missing)} records have no label (first: {missing[0]})")
    return records


@main.command(cls=_Command)
@click.option("--features", type=click.Path(), required=True)
@click.option("--val-fraction", type=float, default=0.2)
@click.option("--seed", type=int, default=0)
@click.option("--config", type=click.Path(),
              help="JSON with optional 'model' and 'train' sections.")
@click.option("--out", type=click.Path(), required=True,
              help="Model JSON path; normalizer stats land at <out>.stats.json.")
def train(features, val_fraction, seed, config, out):
    """Fit the fusion model; prints per-epoch validation AUC."""
    started = time.time()
    cfg = _load_config(config)
    records = _labelled(ft.import_features(features))
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(records))
    n_val = max(1, int(round(val_fraction * len(records))))
    val = [records[i] for i in order[:n_val]]
    tr = [records[i] for i in order[n_val:]]

    model_cfg = fu.FusionConfig.from_dict(
        {**fu.FusionConfig().to_dict(), **cfg.get("model", {}), "seed": seed})
    train_cfg = te.TrainConfig.from_dict(
        {**te.TrainConfig().to_dict(), **cfg.get("train", {}), "seed": seed})
    stats = ft.fit_normalizer(tr)
    model = fu.FusionModel(model_cfg)
    model, history = te.train(model, stats, tr, val, train_cfg)
    for h in history:
        click.echo(f"epoch {h['epoch']:3d}  loss {h['train_loss']:.4f}  "
                   f"val_auc {h['val_auc']:.4f}")

    fu.save_model(model, out)
    stats_path = Path(str(out) + ".stats.json")
    stats_path.write_text(json.dumps(stats.to_json_dict()) + "\n")
    write_manifest("train", {"model": model_cfg.to_dict(),
                             "train": train_cfg.to_dict(),
                             "val_fraction": val_fraction},
                   [features], [out, stats_path], seed, started)


def _load_model_and_stats(model_path, stats_path):
    model = fu.load_model(model_path)
    if stats_path is None:
        stats_path = str(model_path) + ".stats.json"
    if not Path(stats_path).is_file():
        raise MissingFile(f"normalizer stats {stats_path} not found")
    stats = ft.NormalizationStats.from_json_dict(
        json.loads(Path(stats_path).read_text()))
    return model, stats


def _reports(model, stats, records):
    out = []
    for r in records:
        z1, zb = ft.apply_normalizer(stats, r)
        out.append(model.predict(r.scan_id, z1, zb))
    return out


@main.command(cls=_Command)
@click.option("--model", "model_path", type=click.Path(), required=True)
@click.option("--stats", "stats_path", type=click.Path())
@click.option("--features", type=click.Path(), required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--format", "fmt", type=click.Choice(["csv", "json"]),
              default="csv")
def predict(model_path, stats_path, features, out, fmt):
    """Batch risk prediction; probabilities plus contribution scores."""
    started = time.time()
    model, stats = _load_model_and_stats(model_path, stats_path)
    records = ft.import_features(features)
    reports = _reports(model, stats, records)
    if fmt == "json":
        Path(out).write_text(json.dumps(
            [r.to_json_dict() for r in reports], indent=2) + "\n")
    else:
        import csv as _csv
        with open(out, "w", newline="") as fh:
            w = _csv.writer(fh)
            w.writerow(["scan_id", "probability", "model_hash"])
            for r in reports:
                w.writerow([r.scan_id, repr(r.probability), r.model_hash])
    write_manifest("predict", {}, [features, model_path], [out], None, started)


@main.command(cls=_Command)
@click.option("--model", "model_path", type=click.Path(), required=True)
@click.option("--stats", "stats_path", type=click.Path())
@click.option("--features", type=click.Path(), required=True)
@click.option("--scan-id", required=True)
def explain(model_path, stats_path, features, scan_id):
    """Contribution table for one scan, with per-group subtotals."""
    model, stats = _load_model_and_stats(model_path, stats_path)
    records = [r for r in ft.import_features(features)
               if r.scan_id == scan_id]
    if not records:
        raise MissingFile(f"scan_id {scan_id!r} not in {features}")
    report = _reports(model, stats, records)[0]
    click.echo(f"scan {scan_id}  probability {report.probability:.4f}")
    click.echo("feature contributions (descending):")
    ranked = sorted(report.contributions.items(), key=lambda kv: -kv[1])
    for name, score in ranked:
        click.echo(f"  {name:<16} {score:.6f}")
    click.echo("group subtotals:")
    groups = {"deep_features": ("deep_features",), **bm.BIOMARKER_GROUPS}
    for group, members in groups.items():
        subtotal = sum(report.contributions[m] for m in members)
        click.echo(f"  {group:<16} {subtotal:.6f}")


@main.command(cls=_Command)
@click.option("--model", "model_path", type=click.Path(), required=True)
@click.option("--stats", "stats_path", type=click.Path())
@click.option("--features", type=click.Path(), required=True,
              help="Labelled feature records to score.")
@click.option("--threshold", type=float,
              help="Fixed operating threshold; default is Youden's J on "
                   "these records.")
@click.option("--compare", type=click.Path(),
              help="Second prediction CSV for a McNemar test.")
@click.option("--replicates", type=int, default=1000)
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(), required=True,
              help="Metrics JSON path; ROC points land at <out>.roc.csv.")
def evaluate(model_path, stats_path, features, threshold, compare, replicates,
             seed, out):
    """Metrics with bootstrap CIs, ROC points, optional model comparison."""
    started = time.time()
    model, stats = _load_model_and_stats(model_path, stats_path)
    records = _labelled(ft.import_features(features))
    labels = np.array([r.label for r in records])
    scores = te.predict_scores(model, stats, records)
    if threshold is None:
        threshold, degenerate = te.select_threshold(scores, labels)
        if degenerate:
            log.warning("all scores identical; threshold is degenerate")
    report = te.evaluate(scores, labels, threshold,
                         replicates=replicates, seed=seed)
    doc = report.to_json_dict()

    if compare:
        import csv as _csv
        with open(compare, newline="") as fh:
            other = {row["scan_id"]: float(row["probability"])
                     for row in _csv.DictReader(fh)}
        missing = [r.scan_id for r in records if r.scan_id not in other]
        if missing:
            raise MissingFile(
                f"{len(missing)} scans absent from {compare}")
        other_scores = np.array([other[r.scan_id] for r in records])
        pred_a = (scores >= threshold).astype(int)
        pred_b = (other_scores >= threshold).astype(int)
        doc["mcnemar_p"] = te.mcnemar_test(pred_a, pred_b, labels)

    Path(out).write_text(json.dumps(doc, indent=2) + "\n")
    roc_path = Path(str(out) + ".roc.csv")
    with open(roc_path, "w", newline="") as fh:
        import csv as _csv
        w = _csv.writer(fh)
        w.writerow(["fpr", "tpr", "threshold"])
        for fpr, tpr, th in te.roc_points(scores, labels):
            w.writerow([repr(float(fpr)), repr(float(tpr)),
                        repr(float(th))])
    inputs = [features, model_path] + ([compare] if compare else [])
    write_manifest("evaluate", {"threshold": threshold,
                                "replicates": replicates},
                   inputs, [out, roc_path], seed, started)
    click.echo(json.dumps(doc, indent=2))


@main.command(cls=_Command)
@click.option("--name", type=click.Choice(sorted(ph.bundled_specs())),
              help="One of the bundled verification scenes.")
@click.option("--spec", "spec_path", type=click.Path(),
              help="PhantomSpec JSON (overrides --name).")
@click.option("--seed", type=int)
@click.option("--out", "out_dir", type=click.Path(), required=True)
def phantom(name, spec_path, seed, out_dir):
    """Generate a synthetic scene plus its ground-truth JSON."""
    started = time.time()
    if spec_path:
        spec = ph.load_spec(spec_path)
    elif name:
        spec = ph.bundled_specs()[name]
    else:
        raise MissingFile("either --name or --spec is required")
    if seed is not None:
        spec.seed = seed
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    volume, masks, truth = ph.generate(spec)
    outputs = []
    vol_path = out_dir / "volume.ctqh"
    vio.save_volume(volume, vol_path)
    outputs.append(vol_path)
    for mask_name, mask in masks.items():
        p = out_dir / f"{mask_name}.ctqh"
        vio.save_mask(mask, p)
        outputs.append(p)
    truth_path = out_dir / "ground_truth.json"
    truth_path.write_text(json.dumps(truth.to_json_dict(), indent=2) + "\n")
    spec_out = out_dir / "spec.json"
    ph.save_spec(spec, spec_out)
    outputs += [truth_path, spec_out]
    write_manifest("phantom", spec.to_json_dict(),
                   [spec_path] if spec_path else [], outputs, spec.seed,
                   started)
    click.echo(f"wrote {len(outputs)} files to {out_dir}")


if __name__ == "__main__":
    main()
