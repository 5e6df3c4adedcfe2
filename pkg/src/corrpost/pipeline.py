"""End-to-end experiment stages and set-level evaluation reports.

Stages communicate only through files under ``out_dir``::

    config.json
    data/<family>/manifest.json, data/<family>/<class>/<res>/<index>.pgm
    filters/<family>/<kind>_<res>.cflt, filters/<family>/filters.json
    responses/<family>/<kind>/metrics.csv, crops.npz
    patches/<family>/<kind>/<sample_id>.pt32, patches/<family>/<kind>/index.csv
    model/cnn.cnnw (+ .json), model/train_report.json
    reports/eval.json, eval.csv, cross_eval.json, cross_eval.csv, *.txt

so any stage can be re-run in isolation.
"""
from __future__ import annotations

import contextlib
import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import cfsynth, classifier, response, synthdata
from .errors import ConfigError, CorrpostError, InputError, ManifestError
from .imagefft import centered, fft2, ifft2
from .synthdata import ROLE_FILTER, ROLE_TEST, ROLE_TRAIN, DatasetManifest, Family

log = logging.getLogger(__name__)

METHODS = ("peak", "pce", "cnn")
METHOD_TITLES = {"peak": "Correlation peak height", "pce": "PCE", "cnn": "ResNet-18"}
KINDS = ("OTMACH", "MINACE")
# "filter": one baseline threshold per filter kind, shared by all resolutions;
# "filter_resolution": a separate threshold for every resolution
THRESHOLD_SCOPES = ("filter", "filter_resolution")
LOW_BUCKET = 0.001   # percent
HIGH_BUCKET = 25.0   # percent


def default_vehicles() -> dict:
    return {"family": "VEHICLE_SHAPES", "true_class": 0,
            "counts": {"0": 180, "1": 90, "2": 90, "3": 90}, "heldout_classes": [3],
            "split_false": False, "resolutions": [256, 128, 64, 32],
            "rotation_range": [-30.0, 30.0], "filter_train_per_resolution": 30,
            "background_contrast": [0.02, 0.3], "background_base": 0.15}


def default_faces() -> dict:
    return {"family": "FACE_BLOBS", "true_class": 0,
            "counts": {"0": 50, "1": 19, "2": 19, "3": 19}, "heldout_classes": [],
            "split_false": True, "resolutions": [256, 128, 64, 32],
            "rotation_range": [-30.0, 30.0], "filter_train_per_resolution": 30,
            "background_contrast": [0.02, 0.3], "background_base": 0.15}


@dataclass
class ExperimentConfig:
    seed: int = 0
    crop_mode: str = "center"
    threads: int = 1
    vehicles: dict = field(default_factory=default_vehicles)
    faces: dict = field(default_factory=default_faces)
    otmach: dict = field(default_factory=lambda: dict(zip(("alpha", "beta", "gamma"),
                                                          cfsynth.OTMACH_DEFAULTS)))
    minace_noise_rel: float = cfsynth.MINACE_NOISE_REL
    train: dict = field(default_factory=lambda: asdict(classifier.TrainConfig()))
    cnn_filter: str = "OTMACH"
    set_definition: str = "class_resolution"
    threshold_scope: str = "filter"

    def __post_init__(self):
        try:
            response.CropMode.parse(self.crop_mode)
        except KeyError:
            raise ConfigError(f"unknown crop mode {self.crop_mode!r}")
        if self.cnn_filter not in KINDS:
            raise ConfigError(f"cnn_filter must be one of {KINDS}")
        if self.set_definition != "class_resolution":
            raise ConfigError("only the class_resolution set definition is implemented")
        if self.threshold_scope not in THRESHOLD_SCOPES:
            raise ConfigError(f"threshold_scope must be one of {THRESHOLD_SCOPES}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        try:
            self.train_config()
            for fam in ("vehicles", "faces"):
                self.manifest(fam).validate()
        except (CorrpostError, TypeError) as exc:
            raise ConfigError(f"invalid config: {exc}") from exc
        if Family(self.vehicles["family"]) is Family(self.faces["family"]):
            raise ConfigError("vehicles and faces must use different families")

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown config fields {sorted(extra)}")
        base = cls()
        merged = {}
        for k in cls.__dataclass_fields__:
            v = d.get(k, getattr(base, k))
            if isinstance(getattr(base, k), dict) and isinstance(v, dict):
                v = {**getattr(base, k), **v}
            merged[k] = v
        return cls(**merged)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config {path} does not exist")
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    def manifest(self, which: str) -> DatasetManifest:
        d = dict(getattr(self, which))
        if "seed" in d:
            raise ConfigError("manifest seeds derive from the top-level seed")
        # distinct, reproducible streams per corpus
        d["seed"] = self.seed * 2 + (0 if which == "vehicles" else 1)
        d["crop_mode"] = self.crop_mode
        return DatasetManifest.from_dict(d)

    def train_config(self) -> classifier.TrainConfig:
        d = dict(self.train)
        d["seed"] = self.seed
        return classifier.TrainConfig(**d)


# --- helpers ------------------------------------------------------------------------

@contextlib.contextmanager
def stage(name: str):
    """Tag any error escaping the block with the stage name."""
    try:
        yield
    except CorrpostError as exc:
        if not getattr(exc, "stage", None):
            exc.stage = name
            exc.args = (f"[{name}] {exc.args[0] if exc.args else ''}",) + exc.args[1:]
        raise


def _families(cfg: ExperimentConfig):
    return (("vehicles", cfg.vehicles["family"]), ("faces", cfg.faces["family"]))


def set_id(e: dict) -> str:
    return f"{e['class_id']}@{e['resolution']}"


def _load_manifest(out: Path, family: str) -> DatasetManifest:
    path = out / "data" / family / "manifest.json"
    if not path.exists():
        raise ConfigError(f"no corpus for {family} under {out}; run gen-data first")
    return synthdata.load_manifest(path)


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# --- stages -------------------------------------------------------------------------

def gen_data(cfg: ExperimentConfig, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    result = {}
    with stage("gen-data"):
        for which, family in _families(cfg):
            m = synthdata.generate_corpus(cfg.manifest(which), out, threads=cfg.threads)
            result[family] = len(m.entries)
            log.info("gen-data: %s -> %d scenes", family, len(m.entries))
    return result


def _filter_path(out: Path, family: str, kind: str, res: int) -> Path:
    return out / "filters" / family / f"{kind.lower()}_{res}.cflt"


def train_filters(cfg: ExperimentConfig, out: Path) -> dict:
    """Synthesize one OT MACH and one MINACE filter per family and resolution."""
    info = {}
    with stage("train-filter"):
        for _, family in _families(cfg):
            m = _load_manifest(out, family)
            fam_info = {}
            for res in m.resolutions:
                entries = [e for e in m.entries
                           if e["role"] == ROLE_FILTER and e["resolution"] == res]
                if not entries:
                    raise ManifestError(f"{family}@{res}: no filter-training scenes")
                ts = cfsynth.TrainingSet(synthdata.load_images(m, out / "data", entries))
                om = cfsynth.synthesize_otmach(ts, cfg.otmach["alpha"], cfg.otmach["beta"],
                                               cfg.otmach["gamma"])
                X = ts.spectra()
                noise_c = cfg.minace_noise_rel * float((np.abs(X) ** 2).max())
                mn = cfsynth.synthesize_minace(ts, noise_c)
                for kind, filt in (("OTMACH", om), ("MINACE", mn)):
                    path = _filter_path(out, family, kind, res)
                    path.parent.mkdir(parents=True, exist_ok=True)
                    cfsynth.save_filter(path, filt)
                    fam_info[f"{kind}@{res}"] = {
                        "path": str(path.relative_to(out)),
                        "params": filt.params,
                        "training_digest": filt.training_digest.hex(),
                        "training_samples": [e["sample_id"] for e in entries],
                    }
            info[family] = fam_info
            _write_json(out / "filters" / family / "filters.json", fam_info)
            # record filter references in the manifest
            m.filters = {k: v["path"] for k, v in fam_info.items()}
            (out / "data" / family / "manifest.json").write_text(m.to_json())
    return info


def correlate(cfg: ExperimentConfig, out: Path) -> dict:
    """Correlate every non-filter scene with both filters of its resolution.

    Writes metric CSVs (on the full response) and raw 32x32 crops in both crop
    modes. Responses are circularly centered first so zero lag sits at
    ``(R/2, R/2)``; peak rows/cols refer to that centered frame.
    """
    counts = {}
    with stage("correlate"):
        for _, family in _families(cfg):
            m = _load_manifest(out, family)
            entries = [e for e in m.entries if e["role"] != ROLE_FILTER]
            filters = {(k, r): cfsynth.load_filter(_filter_path(out, family, k, r))
                       for k in KINDS for r in m.resolutions}

            def work(e):
                img = synthdata.load_images(m, out / "data", [e])[0]
                F = fft2(img)
                res = {}
                for kind in KINDS:
                    H = filters[(kind, e["resolution"])].H
                    r = centered(np.abs(ifft2(np.conj(F) * H)))
                    res[kind] = (response.metric_scores(r),
                                 response.crop(r, response.CropMode.CENTER),
                                 response.crop(r, response.CropMode.PEAK))
                return res

            if cfg.threads > 1:
                with ThreadPoolExecutor(cfg.threads) as pool:
                    results = list(pool.map(work, entries))
            else:
                results = [work(e) for e in entries]
            for kind in KINDS:
                d = out / "responses" / family / kind.lower()
                d.mkdir(parents=True, exist_ok=True)
                response.write_metrics_csv(
                    d / "metrics.csv",
                    [(e["sample_id"], set_id(e), e["label"], r[kind][0])
                     for e, r in zip(entries, results)])
                np.savez_compressed(
                    d / "crops.npz", sample_id=np.array([e["sample_id"] for e in entries]),
                    center=np.stack([r[kind][1] for r in results]),
                    peak=np.stack([r[kind][2] for r in results]))
            counts[family] = len(entries)
    return counts


def prep(cfg: ExperimentConfig, out: Path) -> dict:
    """Normalize the stored crops into PT32 patch files for the configured crop mode."""
    mode = response.CropMode.parse(cfg.crop_mode)
    counts = {}
    with stage("prep"):
        for _, family in _families(cfg):
            m = _load_manifest(out, family)
            by_id = {e["sample_id"]: e for e in m.entries}
            for kind in KINDS:
                src = out / "responses" / family / kind.lower() / "crops.npz"
                if not src.exists():
                    raise ConfigError(f"missing {src}; run correlate first")
                z = np.load(src)
                crops = z["center" if mode is response.CropMode.CENTER else "peak"]
                d = out / "patches" / family / kind.lower()
                d.mkdir(parents=True, exist_ok=True)
                rows = []
                for sid, raw in zip(z["sample_id"].tolist(), crops):
                    e = by_id[sid]
                    patch = response.ResponsePatch(response.normalize01(raw), e["resolution"], mode)
                    response.save_patch(d / f"{sid}.pt32", patch)
                    rows.append((sid, set_id(e), e["label"], e["role"], e["class_id"],
                                 e["resolution"]))
                with open(d / "index.csv", "w", newline="") as fh:
                    w = csv.writer(fh)
                    w.writerow(("sample_id", "set_id", "label", "role", "class_id", "resolution"))
                    w.writerows(rows)
                counts[f"{family}/{kind}"] = len(rows)
    return counts


def load_patch_table(out: Path, family: str, kind: str):
    """Return (index rows, patch array) for one family/filter kind."""
    d = out / "patches" / family / kind.lower()
    if not (d / "index.csv").exists():
        raise ConfigError(f"missing patches under {d}; run prep first")
    with open(d / "index.csv", newline="") as fh:
        rows = [{"sample_id": r["sample_id"], "set_id": r["set_id"], "label": int(r["label"]),
                 "role": r["role"], "class_id": int(r["class_id"]),
                 "resolution": int(r["resolution"])} for r in csv.DictReader(fh)]
    patches = np.stack([response.load_patch(d / f"{r['sample_id']}.pt32").data for r in rows])
    return rows, patches


def train_cnn(cfg: ExperimentConfig, out: Path):
    """Train on the configured filter's responses of the training role of the vehicle corpus."""
    with stage("train-cnn"):
        family = cfg.vehicles["family"]
        rows, patches = load_patch_table(out, family, cfg.cnn_filter)
        idx = [i for i, r in enumerate(rows) if r["role"] == ROLE_TRAIN]
        labels = np.array([rows[i]["label"] for i in idx])
        if len(np.unique(labels)) < 2:
            raise InputError("CNN training data must contain both classes")
        tcfg = cfg.train_config()
        model, report = classifier.train(patches[idx], labels, tcfg)
        d = out / "model"
        d.mkdir(parents=True, exist_ok=True)
        classifier.save_model(d / "cnn.cnnw", model)
        rep = report.to_dict()
        rep["training_samples"] = [rows[i]["sample_id"] for i in idx]
        rep["training_classes"] = sorted({rows[i]["class_id"] for i in idx})
        rep["training_filter"] = cfg.cnn_filter
        rep["family"] = family
        _write_json(d / "train_report.json", rep)
        _write_json(d / "timing.json", {"epoch_seconds": report.epoch_seconds})
    return model, report


# --- baselines -------------------------------------------------------------------------

def best_threshold(scores, labels) -> tuple[float, float]:
    """Threshold maximizing calibration accuracy for the rule ``score >= t -> true``.

    Candidates are midpoints between adjacent distinct scores plus one value
    below the minimum and one above the maximum; the lowest optimal candidate
    wins. Returns ``(threshold, accuracy)``.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if y.all() or not y.any():
        raise InputError("threshold calibration needs both labels")
    u = np.unique(s)
    below = u[0] - 1.0 if len(u) == 1 else u[0] - (u[1] - u[0])
    above = u[-1] + 1.0 if len(u) == 1 else u[-1] + (u[-1] - u[-2])
    cands = np.concatenate(([below], (u[:-1] + u[1:]) / 2, [above]))
    order = np.argsort(s, kind="stable")
    ss, yy = s[order], y[order]
    # number of samples strictly below each candidate
    below_n = np.searchsorted(ss, cands, side="left")
    pos_below = np.concatenate(([0], np.cumsum(yy)))[below_n]
    neg_below = below_n - pos_below
    n_pos = int(yy.sum())
    correct = neg_below + (n_pos - pos_below)
    k = int(np.argmax(correct))
    return float(cands[k]), float(correct[k] / len(s))


def baseline_classify(scores, labels, calib_mask, eval_mask=None) -> tuple[float, float]:
    """Calibrate a threshold on ``calib_mask`` and report the error (%) on ``eval_mask``."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    calib = np.asarray(calib_mask, dtype=bool)
    ev = ~calib if eval_mask is None else np.asarray(eval_mask, dtype=bool)
    thr, _ = best_threshold(s[calib], y[calib])
    pred = s[ev] >= thr
    err = 100.0 * float(np.mean(pred != y[ev])) if ev.any() else 0.0
    return err, thr


# --- evaluation reports -----------------------------------------------------------------

@dataclass
class EvalReport:
    """Per-set error rates for each method plus the set-bucket summaries.

    ``rows`` holds one dict per (filter kind, subset, set) with the error in
    percent for every method; ``summary`` is recomputed from the rows by
    :func:`summarize`.
    """
    title: str = ""
    set_definition: str = "class_resolution"
    methods: list = field(default_factory=lambda: list(METHODS))
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)
    accuracy: dict = field(default_factory=dict)
    lineage: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def bucket_summary(errors) -> dict:
    """Count sets with error < 0.001 % and > 25 %; mean error of the rest; overall mean."""
    e = np.asarray(errors, dtype=np.float64)
    low = e < LOW_BUCKET
    high = e > HIGH_BUCKET
    other = e[~low & ~high]
    return {
        "n_sets": int(e.size),
        "n_below_0.001": int(low.sum()),
        "n_above_25": int(high.sum()),
        "mean_other": float(other.mean()) if other.size else 0.0,
        "n_other": int(other.size),
        "average": float(e.mean()) if e.size else 0.0,
    }


def summarize(rows, methods=METHODS) -> dict:
    out = {}
    for subset in sorted({r["subset"] for r in rows}):
        sub = [r for r in rows if r["subset"] == subset]
        out[subset] = {}
        for kind in ["ALL"] + sorted({r["filter"] for r in sub}):
            sel = sub if kind == "ALL" else [r for r in sub if r["filter"] == kind]
            out[subset][kind] = {m: bucket_summary([r["errors"][m] for r in sel]) for m in methods}
    return out


def _set_rows(kind, subset, samples, preds) -> list:
    rows = []
    groups = {}
    for i, s in enumerate(samples):
        groups.setdefault((s["class_id"], s["resolution"]), []).append(i)
    for (cid, res), idx in sorted(groups.items(), key=lambda kv: (kv[0][0], -kv[0][1])):
        label = samples[idx[0]]["label"]
        errs = {m: 100.0 * float(np.mean(preds[m][idx] != label)) for m in preds}
        rows.append({"filter": kind, "subset": subset, "set_id": f"{cid}@{res}",
                     "class_id": cid, "resolution": res, "label": label, "n": len(idx),
                     "errors": errs})
    return rows


def _metric_table(out: Path, family: str, kind: str) -> dict:
    path = out / "responses" / family / kind.lower() / "metrics.csv"
    if not path.exists():
        raise ConfigError(f"missing {path}; run correlate first")
    return {r["sample_id"]: r for r in response.read_metrics_csv(path)}


def _predictions(out, family, kind, model, calib_role, scope):
    """Return samples, per-method predictions and thresholds for one filter kind."""
    rows, patches = load_patch_table(out, family, kind)
    metrics = _metric_table(out, family, kind)
    scores = {"peak": np.array([metrics[r["sample_id"]]["peak"] for r in rows]),
              "pce": np.array([metrics[r["sample_id"]]["pce"] for r in rows])}
    labels = np.array([r["label"] for r in rows])
    roles = np.array([r["role"] for r in rows])
    res = np.array([r["resolution"] for r in rows])
    if scope == "filter":
        groups = {"all": np.ones(len(rows), dtype=bool)}
    else:
        groups = {str(r): res == r for r in sorted(set(res.tolist()), reverse=True)}
    preds, thresholds = {}, {}
    for m in ("peak", "pce"):
        p = np.zeros(len(rows), dtype=bool)
        for name, sel in groups.items():
            calib = sel & (roles == calib_role)
            thr, _ = best_threshold(scores[m][calib], labels[calib])
            p[sel] = scores[m][sel] >= thr
            thresholds[f"{kind}/{m}/{name}"] = thr
        preds[m] = p.astype(int)
    cnn_scores = classifier.predict_scores(model, patches)
    preds["cnn"] = (cnn_scores >= 0.5).astype(int)
    return rows, preds, thresholds, cnn_scores


def _lineage(cfg, out, family, train_report) -> dict:
    m = _load_manifest(out, family)
    roles = {}
    for e in m.entries:
        roles.setdefault(e["role"], set()).add(e["sample_id"])
    ids = [e["sample_id"] for e in m.entries]
    trained = set(train_report.get("training_samples", []))
    by_id = {e["sample_id"]: e for e in m.entries}
    leaked = sorted({by_id[s]["class_id"] for s in trained} & set(m.heldout_classes))
    return {
        "role_counts": {k: len(v) for k, v in sorted(roles.items())},
        "roles_disjoint": len(ids) == len(set(ids)) == sum(len(v) for v in roles.values()),
        "cnn_training_within_train_role": trained <= roles.get(ROLE_TRAIN, set()),
        "heldout_classes": list(m.heldout_classes),
        "heldout_classes_in_training": leaked,
        "cnn_training_filter": train_report.get("training_filter"),
    }


def _accuracy(rows, preds, subset_role) -> dict:
    sel = [i for i, r in enumerate(rows) if r["role"] == subset_role]
    lab = np.array([rows[i]["label"] for i in sel])
    out = {}
    for m in preds:
        p = preds[m][sel]
        per_res = {}
        for res in sorted({rows[i]["resolution"] for i in sel}, reverse=True):
            k = [j for j, i in enumerate(sel) if rows[i]["resolution"] == res]
            per_res[str(res)] = float(np.mean(p[k] == lab[k]))
        out[m] = {"overall": float(np.mean(p == lab)), "per_resolution": per_res}
    return out


def evaluate(cfg: ExperimentConfig, out: Path, model=None) -> EvalReport:
    """Held-out evaluation on the vehicle corpus, both filter kinds.

    Baselines are calibrated on the CNN-training role and, like the CNN, scored
    on the test role; training-role errors are reported as a separate subset.
    """
    with stage("eval"):
        family = cfg.vehicles["family"]
        model = model or _load_model(out)
        train_report = _load_train_report(out)
        report = EvalReport(title="Vehicle corpus, held-out test sets",
                            set_definition=cfg.set_definition, config=asdict(cfg))
        for kind in KINDS:
            rows, preds, thr, _ = _predictions(out, family, kind, model, ROLE_TRAIN,
                                              cfg.threshold_scope)
            report.thresholds.update(thr)
            for subset, role in (("test", ROLE_TEST), ("train", ROLE_TRAIN)):
                idx = [i for i, r in enumerate(rows) if r["role"] == role]
                report.rows += _set_rows(kind, subset, [rows[i] for i in idx],
                                         {m: preds[m][idx] for m in preds})
            report.accuracy[kind] = _accuracy(rows, preds, ROLE_TEST)
        report.summary = summarize(report.rows)
        report.lineage = _lineage(cfg, out, family, train_report)
        d = out / "reports"
        d.mkdir(parents=True, exist_ok=True)
        (d / "eval.json").write_text(report.to_json())
        (d / "eval.csv").write_text(report_csv(report))
    return report


def cross_domain_eval(cfg: ExperimentConfig, out: Path, model=None) -> EvalReport:
    """Apply the frozen vehicle-trained CNN to the face corpus."""
    with stage("cross-eval"):
        family = cfg.faces["family"]
        if Family(family) is Family(cfg.vehicles["family"]):
            raise ConfigError("cross-domain evaluation needs a different family")
        model = model or _load_model(out)
        train_report = _load_train_report(out)
        trained_family = train_report.get("family", cfg.vehicles["family"])
        if Family(trained_family) is Family(family):
            raise ConfigError("the model was trained on the evaluation family")
        report = EvalReport(title="Face corpus, frozen vehicle CNN",
                            set_definition=cfg.set_definition, config=asdict(cfg))
        for kind in KINDS:
            rows, preds, thr, _ = _predictions(out, family, kind, model, ROLE_TRAIN,
                                              cfg.threshold_scope)
            report.thresholds.update(thr)
            idx = [i for i, r in enumerate(rows) if r["role"] == ROLE_TEST]
            report.rows += _set_rows(kind, "test", [rows[i] for i in idx],
                                     {m: preds[m][idx] for m in preds})
            report.accuracy[kind] = _accuracy(rows, preds, ROLE_TEST)
        report.summary = summarize(report.rows)
        m = _load_manifest(out, family)
        report.lineage = {"family": family, "trained_on": trained_family,
                          "role_counts": {r: sum(e["role"] == r for e in m.entries)
                                          for r in (ROLE_FILTER, ROLE_TRAIN, ROLE_TEST)}}
        d = out / "reports"
        d.mkdir(parents=True, exist_ok=True)
        (d / "cross_eval.json").write_text(report.to_json())
        (d / "cross_eval.csv").write_text(report_csv(report))
    return report


def _load_model(out: Path):
    path = out / "model" / "cnn.cnnw"
    if not path.exists():
        raise ConfigError(f"missing {path}; run train-cnn first")
    return classifier.load_model(path)


def _load_train_report(out: Path) -> dict:
    path = out / "model" / "train_report.json"
    return json.loads(path.read_text()) if path.exists() else {}


# --- rendering ----------------------------------------------------------------------------

CSV_COLUMNS = ("filter", "subset", "set_id", "class_id", "resolution", "label", "n",
               "err_peak", "err_pce", "err_cnn")


def report_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in report.rows:
        w.writerow([r["filter"], r["subset"], r["set_id"], r["class_id"], r["resolution"],
                    r["label"], r["n"]] + [repr(float(r["errors"][m])) for m in METHODS])
    return buf.getvalue()


def parse_report_csv(text: str) -> list:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append({"filter": rec["filter"], "subset": rec["subset"], "set_id": rec["set_id"],
                     "class_id": int(rec["class_id"]), "resolution": int(rec["resolution"]),
                     "label": int(rec["label"]), "n": int(rec["n"]),
                     "errors": {m: float(rec[f"err_{m}"]) for m in METHODS}})
    return rows


def report_text(report: EvalReport, subset: str = "test") -> str:
    """Aligned text rendering: per-set errors plus the set-bucket summary rows."""
    lines = [report.title, ""]
    head = f"{'filter':<7} {'set':>8} {'label':>5} {'n':>4} " + \
        " ".join(f"{m:>8}" for m in METHODS)
    lines += [f"per-set error, % (subset: {subset})", head, "-" * len(head)]
    for r in report.rows:
        if r["subset"] != subset:
            continue
        lines.append(f"{r['filter']:<7} {r['set_id']:>8} {r['label']:>5} {r['n']:>4} " +
                     " ".join(f"{r['errors'][m]:>8.2f}" for m in METHODS))
    summ = report.summary.get(subset, {}).get("ALL")
    if summ:
        width = max(len(t) for t in METHOD_TITLES.values()) + 2
        lines += ["", f"{'':<40}" + "".join(f"{METHOD_TITLES[m]:>{width}}" for m in METHODS)]
        for key, title, fmt in (("n_below_0.001", "Number of image sets with error < 0.001%", "d"),
                                ("n_above_25", "Number of image sets with error > 25%", "d"),
                                ("mean_other", "Average error of the other sets, %", ".2f"),
                                ("average", "Average error, %", ".2f")):
            lines.append(f"{title:<40}" + "".join(
                f"{format(summ[m][key], fmt):>{width}}" for m in METHODS))
    return "\n".join(lines) + "\n"


def render_reports(cfg: ExperimentConfig, out: Path) -> list:
    written = []
    with stage("report"):
        for name in ("eval", "cross_eval"):
            path = out / "reports" / f"{name}.json"
            if not path.exists():
                continue
            rep = EvalReport.from_dict(json.loads(path.read_text()))
            (out / "reports" / f"{name}.csv").write_text(report_csv(rep))
            txt = out / "reports" / f"{name}.txt"
            txt.write_text(report_text(rep))
            written.append(txt)
        if not written:
            raise ConfigError("no reports to render; run eval or cross-eval first")
    return written


def run_all(cfg: ExperimentConfig, out: Path) -> tuple[EvalReport, EvalReport]:
    gen_data(cfg, out)
    train_filters(cfg, out)
    correlate(cfg, out)
    prep(cfg, out)
    model, _ = train_cnn(cfg, out)
    ev = evaluate(cfg, out, model)
    cx = cross_domain_eval(cfg, out, model)
    render_reports(cfg, out)
    return ev, cx
