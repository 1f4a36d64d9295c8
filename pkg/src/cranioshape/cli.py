"""Command-line pipeline: phantom -> preprocess -> morph -> build -> evaluate/classify/edit.

Exit codes: 0 success, 1 usage, 2 I/O, 3 numerical failure, 4 validation.
Errors are reported as one JSON object on stderr.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import edit, pipeline, ssm, synth
from .align import gpa
from .classify import ClassificationReport
from .errors import CranioShapeError, MeshFormatError, NumericalError, ValidationError
from .meshio import dump_json, save_mesh
from .register import LbrpConfig, NicpConfig, surface_normal_deviation
from .mesh import TriMesh
from .scan import DiagnosisClass

logger = logging.getLogger("cranioshape")

EXIT_USAGE, EXIT_IO, EXIT_NUMERICAL, EXIT_VALIDATION = 1, 2, 3, 4

COMMON_DEFAULTS = {"jobs": 1, "seed": 0, "log_level": "WARNING"}

# default values per subcommand; also the set of keys a config file may set
DEFAULTS = {
    "phantom": {"out": None, "per_class": 10, "severity_min": 0.4, "severity_max": 1.0,
                "resolution": 3.5, "template_resolution": 3.0, "jitter_max": 0.3},
    "preprocess": {"corpus": None, "out": None, "dedup_tol": 1e-6, "min_component_fraction": 0.05,
                   "mirror": True},
    "morph": {"corpus": None, "template": None, "out": None, "method": "nicp-a",
              "n_iters": 80, "alpha0": 1e8, "alpha_decay": 0.8, "landmark_iters": 51,
              "inner_exit_eps": 100.0, "max_inner": 20, "max_angle": 45.0, "gamma": 1.0,
              "lambda1": 10.0, "lambda2": 0.1},
    "build": {"morphs": None, "template": None, "out": None, "keep": None, "cranial": True,
              "submodels": True, "release_profile": False},
    "eval-model": {"model": None, "morphs": None, "out": None, "max_components": 20, "n_samples": 100},
    "eval-morph": {"morphs": None, "out": None},
    "classify": {"model": None, "morphs": None, "out": None, "template": None, "classifier": "lda",
                 "folds": 10, "max_components": 100, "rebuild_model_per_fold": False},
    "sample": {"model": None, "out": None, "n": 100, "clamp": 3.0},
    "transfer": {"model": None, "morphs": None, "subject": None, "to_class": None, "from_class": None,
                 "out": None},
    "flex": {"model": None, "template": None, "fixed": "cranial", "m": 3, "eps": 1e-6, "out": None},
}
REQUIRED = {
    "phantom": ["out"], "preprocess": ["corpus", "out"], "morph": ["corpus", "template", "out"],
    "build": ["morphs", "template", "out"], "eval-model": ["model", "morphs", "out"],
    "eval-morph": ["morphs", "out"], "classify": ["model", "morphs", "out"], "sample": ["model", "out"],
    "transfer": ["model", "morphs", "subject", "to_class", "out"], "flex": ["model"],
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _keep(value: str):
    try:
        return int(value)
    except ValueError:
        return float(value)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON configuration file; flags override it")
    common.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
    common.add_argument("--jobs", type=int, help="worker processes for scan-level stages")
    common.add_argument("--seed", type=int, help="root random seed")
    common.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR"])

    parser = _Parser(prog="cranioshape", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_, argument_default=argparse.SUPPRESS)

    p = add("phantom", "generate a labelled phantom corpus and a template")
    p.add_argument("--out")
    p.add_argument("--per-class", type=int)
    p.add_argument("--severity-min", type=float)
    p.add_argument("--severity-max", type=float)
    p.add_argument("--resolution", type=float)
    p.add_argument("--template-resolution", type=float)
    p.add_argument("--jitter-max", type=float)

    p = add("preprocess", "clean every scan and add mirrored twins")
    p.add_argument("--corpus")
    p.add_argument("--out")
    p.add_argument("--dedup-tol", type=float)
    p.add_argument("--min-component-fraction", type=float)
    p.add_argument("--no-mirror", dest="mirror", action="store_false")

    p = add("morph", "register the template onto every scan")
    p.add_argument("--corpus")
    p.add_argument("--template", help="template PLY with a landmark JSON sidecar")
    p.add_argument("--out")
    p.add_argument("--method", choices=["nicp-a", "nicp-t", "2s-lbrp"])
    p.add_argument("--n-iters", type=int)
    p.add_argument("--alpha0", type=float)
    p.add_argument("--alpha-decay", type=float)
    p.add_argument("--landmark-iters", type=int)
    p.add_argument("--inner-exit-eps", type=float)
    p.add_argument("--max-inner", type=int)
    p.add_argument("--max-angle", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)

    p = add("build", "build the full, per-class and cranial models")
    p.add_argument("--morphs")
    p.add_argument("--template")
    p.add_argument("--out")
    p.add_argument("--keep", type=_keep, help="component count or variance fraction")
    p.add_argument("--no-cranial", dest="cranial", action="store_false")
    p.add_argument("--no-submodels", dest="submodels", action="store_false")
    p.add_argument("--release-profile", action="store_true",
                   help="truncate to the release component counts")

    p = add("eval-model", "compactness, generalization and specificity curves (CSV)")
    p.add_argument("--model")
    p.add_argument("--morphs")
    p.add_argument("--out")
    p.add_argument("--max-components", type=int)
    p.add_argument("--n-samples", type=int)

    p = add("eval-morph", "landmark, v2nn and normal-deviation table (CSV)")
    p.add_argument("--morphs", nargs="+", help="one morph directory per method")
    p.add_argument("--out")

    p = add("classify", "component sweep with stratified cross-validation")
    p.add_argument("--model")
    p.add_argument("--morphs")
    p.add_argument("--out")
    p.add_argument("--template", help="needed with --rebuild-model-per-fold")
    p.add_argument("--classifier", choices=["lda", "nb", "knn"])
    p.add_argument("--folds", type=int)
    p.add_argument("--max-components", type=int)
    p.add_argument("--rebuild-model-per-fold", action="store_true")

    p = add("sample", "random model instances as PLY")
    p.add_argument("--model")
    p.add_argument("--out")
    p.add_argument("--n", type=int)
    p.add_argument("--clamp", type=float)

    p = add("transfer", "move one subject to another diagnosis class")
    p.add_argument("--model")
    p.add_argument("--morphs")
    p.add_argument("--subject")
    p.add_argument("--to", dest="to_class")
    p.add_argument("--from", dest="from_class")
    p.add_argument("--out", help="output PLY")

    p = add("flex", "flexibility modes with a fixed region")
    p.add_argument("--model")
    p.add_argument("--template", help="needed for --fixed cranial")
    p.add_argument("--fixed", help="'cranial', 'none' or a JSON file with vertex indices")
    p.add_argument("--m", type=int)
    p.add_argument("--eps", type=float)
    p.add_argument("--out", help="summary JSON (the modes go into the model directory)")
    return parser


def resolve_config(command: str, ns: argparse.Namespace) -> dict:
    """Defaults, then the config file (top level and per-command section), then flags."""
    cfg = dict(COMMON_DEFAULTS)
    cfg.update(DEFAULTS[command])
    given = vars(ns)
    path = given.get("config")
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except OSError as exc:
            raise MeshFormatError(f"{path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise UsageError(f"{path}: configuration must be a JSON object")
        section = doc.get(command, {})
        if not isinstance(section, dict):
            raise UsageError(f"{path}: section {command!r} must be a JSON object")
        known = set(COMMON_DEFAULTS).union(*DEFAULTS.values())
        # top-level keys are shared by all commands; each command takes the ones it knows
        for key, value in doc.items():
            if key in DEFAULTS:
                continue
            key = key.replace("-", "_")
            if key not in known:
                raise UsageError(f"{path}: unknown setting {key!r}")
            if key in cfg:
                cfg[key] = value
        for key, value in section.items():
            key = key.replace("-", "_")
            if key not in cfg:
                raise UsageError(f"{path}: unknown setting {key!r} for {command}")
            cfg[key] = value
    for key, value in given.items():
        if key in ("command", "config", "print_config"):
            continue
        cfg[key] = value
    missing = [k for k in REQUIRED[command] if cfg.get(k) in (None, "")]
    if missing and not given.get("print_config"):
        raise UsageError(f"{command}: missing required setting(s): "
                         + ", ".join("--" + k.replace("_", "-") for k in missing))
    if cfg["jobs"] < 1:
        raise UsageError("--jobs must be at least 1")
    return cfg


# ---------------------------------------------------------------------------
# helpers

def _num(x) -> str:
    return repr(float(x))


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_num(v) if isinstance(v, (float, np.floating)) else v for v in r])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(buf.getvalue())


def _template(path) -> "pipeline.Scan":
    return pipeline.load_scan(Path(path))


def _nicp_config(cfg) -> NicpConfig:
    return NicpConfig(n_iters=cfg["n_iters"], alpha0=cfg["alpha0"], alpha_decay=cfg["alpha_decay"],
                      landmark_iters=cfg["landmark_iters"], inner_exit_eps=cfg["inner_exit_eps"],
                      max_inner=cfg["max_inner"], normal_compat_max_deg=cfg["max_angle"], gamma=cfg["gamma"])


# ---------------------------------------------------------------------------
# subcommands

def cmd_phantom(cfg) -> dict:
    out = Path(cfg["out"])
    ccfg = synth.CorpusConfig(severity_range=(cfg["severity_min"], cfg["severity_max"]),
                              jitter_range=(0.0, cfg["jitter_max"]), resolution=cfg["resolution"])
    specs = synth.corpus_specs({c: cfg["per_class"] for c in DiagnosisClass}, cfg["seed"], ccfg)
    scans = pipeline.parallel_map(synth._generate, specs, cfg["jobs"])
    pipeline.save_corpus(scans, out / "scans")
    tpl = synth.make_template(cfg["template_resolution"], seed=cfg["seed"])
    pipeline.save_scan(tpl, out)
    return {"scans": len(scans), "corpus": str(out / "scans"), "template": str(out / "template.ply")}


def cmd_preprocess(cfg) -> dict:
    scans = pipeline.load_corpus(cfg["corpus"])
    out = pipeline.preprocess(scans, cfg["mirror"], cfg["dedup_tol"], cfg["min_component_fraction"])
    pipeline.save_corpus(out, cfg["out"])
    return {"scans": len(out), "corpus": str(cfg["out"])}


def cmd_morph(cfg) -> dict:
    tpl = _template(cfg["template"])
    scans = pipeline.load_corpus(cfg["corpus"])
    lbrp = LbrpConfig(lambda1=cfg["lambda1"], lambda2=cfg["lambda2"], normal_compat_max_deg=cfg["max_angle"])
    recs = pipeline.morph_corpus(tpl, scans, cfg["method"], _nicp_config(cfg), lbrp, cfg["jobs"])
    out = Path(cfg["out"])
    pipeline.save_morphs(recs, scans, tpl, out, method=cfg["method"])
    _write_csv(out / "metrics.csv", ["subject_id", "diagnosis", "mirrored", "landmark_error_mm", "v2nn_mm"],
               [[r.subject_id, s.diagnosis.label, int(s.mirrored), r.metrics["landmark_error"], r.metrics["v2nn"]]
                for r, s in zip(recs, scans)])
    return {"morphs": len(recs), "out": str(out),
            "mean_v2nn": float(np.mean([r.metrics["v2nn"] for r in recs])),
            "mean_landmark_error": float(np.mean([r.metrics["landmark_error"] for r in recs]))}


def cmd_build(cfg) -> dict:
    tpl = _template(cfg["template"])
    morphs = pipeline.load_morphs(cfg["morphs"])
    models = pipeline.build_models(morphs, tpl, cfg["cranial"], cfg["submodels"], cfg["keep"])
    out = Path(cfg["out"])
    summary = {}
    for name, model in models.items():
        if cfg["release_profile"] and name in ssm.RELEASE_PROFILE:
            model = ssm.release_truncate(model, name)
        ssm.save_model(model, out / name)
        summary[name] = {"k": model.k, "p": model.p, "n_train": model.n_train}
    return {"models": summary, "out": str(out)}


def _model_shapes(model, morphs):
    """Training shapes of `model` (its class only for submodels), GPA-aligned."""
    sel = np.ones(len(morphs.labels), bool)
    if model.class_label is not None:
        sel = np.array([c == model.class_label for c in morphs.labels])
    x = model.restrict(morphs.shapes[sel])
    return gpa(x).aligned


def cmd_eval_model(cfg) -> dict:
    model = ssm.load_model(cfg["model"])
    morphs = pipeline.load_morphs(cfg["morphs"])
    shapes = _model_shapes(model, morphs)
    top = max(1, min(cfg["max_components"], model.k))
    js = np.arange(1, top + 1)
    comp = [ssm.compactness(model, j) for j in js]
    gen = ssm.generalization(shapes, model.mass, js)
    spec = ssm.specificity(model, ssm.align_to_model(model, shapes), js, cfg["n_samples"], cfg["seed"])
    _write_csv(cfg["out"], ["components", "compactness", "generalization_mm", "specificity_mm"],
               [[int(j), c, g, s] for j, c, g, s in zip(js, comp, gen, spec)])
    return {"rows": int(top), "out": str(cfg["out"])}


def cmd_eval_morph(cfg) -> dict:
    rows = []
    dirs = cfg["morphs"] if isinstance(cfg["morphs"], list) else [cfg["morphs"]]
    for d in dirs:
        morphs = pipeline.load_morphs(d)
        method = pipeline.morph_method(d)
        lm = np.array([m["landmark_error"] for m in morphs.metrics])
        vv = np.array([m["v2nn"] for m in morphs.metrics])
        groups = {}
        for x, c in zip(morphs.shapes, morphs.labels):
            groups.setdefault(c.label, []).append(TriMesh(x, morphs.faces))
        nd, per = surface_normal_deviation(groups, per_class=True)
        sd = float(np.std(list(per.values()))) if per else float("nan")
        rows.append([method, len(lm), lm.mean(), lm.std(), vv.mean(), vv.std(), nd, sd])
    _write_csv(cfg["out"], ["method", "n", "landmark_error_mean_mm", "landmark_error_std_mm", "v2nn_mean_mm",
                            "v2nn_std_mm", "normal_deviation_mean_deg", "normal_deviation_std_deg"], rows)
    return {"methods": [r[0] for r in rows], "out": str(cfg["out"])}


def cmd_classify(cfg) -> dict:
    model = ssm.load_model(cfg["model"])
    morphs = pipeline.load_morphs(cfg["morphs"])
    tpl = _template(cfg["template"]) if cfg["template"] else None
    best, rep = pipeline.classify_morphs(morphs, model, cfg["classifier"], cfg["max_components"], cfg["folds"],
                                         cfg["seed"], cfg["rebuild_model_per_fold"], tpl)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    doc = rep.to_json()
    doc["protocol"] = {"folds": cfg["folds"], "seed": cfg["seed"],
                       "rebuild_model_per_fold": bool(cfg["rebuild_model_per_fold"])}
    dump_json(doc, out / "report.json")
    (out / "report.txt").write_text(rep.to_text())
    return {"accuracy": rep.accuracy, "g_mean": rep.g_mean, "best_components": best, "out": str(out)}


def cmd_sample(cfg) -> dict:
    model = ssm.load_model(cfg["model"])
    alpha, shapes = ssm.sample(model, cfg["seed"], cfg["clamp"], n=cfg["n"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    width = max(3, len(str(cfg["n"] - 1)))
    for i, x in enumerate(shapes):
        save_mesh(TriMesh(x, model.faces), out / f"sample_{i:0{width}d}.ply")
    _write_csv(out / "coefficients.csv", ["sample"] + [f"alpha_{j + 1}" for j in range(model.k)],
               [[i] + [float(a) for a in row] for i, row in enumerate(alpha)])
    return {"samples": int(cfg["n"]), "out": str(out)}


def cmd_transfer(cfg) -> dict:
    model = ssm.load_model(cfg["model"])
    morphs = pipeline.load_morphs(cfg["morphs"])
    feats = pipeline.extract_features(model, morphs)
    idx = feats.index_of().get(cfg["subject"])
    if idx is None:
        raise ValidationError(f"subject {cfg['subject']!r} not found")
    means = edit.class_mean_coefficients(model, feats)
    src = DiagnosisClass.parse(cfg["from_class"]) if cfg["from_class"] else DiagnosisClass(feats.labels[idx])
    dst = DiagnosisClass.parse(cfg["to_class"])
    a2 = edit.pathology_transfer(feats.alpha[idx], means, src, dst)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_mesh(TriMesh(ssm.reconstruct(model, a2), model.faces), out)
    dump_json({"subject": cfg["subject"], "from": src.label, "to": dst.label,
               "alpha": feats.alpha[idx].tolist(), "alpha_transferred": a2.tolist()}, out.with_suffix(".json"))
    return {"out": str(out), "from": src.label, "to": dst.label}


def cmd_flex(cfg) -> dict:
    model = ssm.load_model(cfg["model"])
    fixed = cfg["fixed"]
    if fixed == "cranial":
        if not cfg["template"]:
            raise UsageError("--fixed cranial needs --template")
        tpl = _template(cfg["template"])
        verts = tpl.mesh.vertices if model.vertex_mask is None else tpl.mesh.vertices[model.vertex_mask]
        idx = ssm.cranial_mask(verts, tpl.landmarks)
    elif fixed == "none":
        idx = np.zeros(0, np.int64)
    else:
        try:
            idx = np.asarray(json.loads(Path(fixed).read_text()), dtype=np.int64)
        except OSError as exc:
            raise MeshFormatError(f"{fixed}: {exc}") from exc
        except (json.JSONDecodeError, ValueError, TypeError) as exc:
            raise ValidationError(f"{fixed}: expected a JSON list of vertex indices ({exc})") from exc
    basis = edit.flexibility_modes(model, idx, cfg["m"], cfg["eps"])
    edit.save_flexibility(basis, cfg["model"])
    rms = [edit.region_rms(model, basis, j) for j in range(basis.m)]
    summary = {"model": str(cfg["model"]), "m": basis.m, "n_fixed": int(len(idx)),
               "ratios": basis.ratios.tolist(), "fixed_over_free_rms": [f / r for f, r in rms]}
    if cfg["out"]:
        dump_json(summary, cfg["out"])
    return summary


COMMANDS = {"phantom": cmd_phantom, "preprocess": cmd_preprocess, "morph": cmd_morph, "build": cmd_build,
            "eval-model": cmd_eval_model, "eval-morph": cmd_eval_morph, "classify": cmd_classify,
            "sample": cmd_sample, "transfer": cmd_transfer, "flex": cmd_flex}


def _fail(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if not ns.command:
            raise UsageError("a subcommand is required")
        cfg = resolve_config(ns.command, ns)
        if getattr(ns, "print_config", False):
            print(json.dumps({"command": ns.command, **cfg}, indent=2, sort_keys=True))
            return 0
        logging.basicConfig(level=cfg["log_level"], format="%(levelname)s %(name)s: %(message)s")
        result = COMMANDS[ns.command](cfg)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except (MeshFormatError, OSError) as exc:
        return _fail(EXIT_IO, "io", str(exc))
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERICAL, "numerical", str(exc))
    except (ValidationError, CranioShapeError, ValueError, KeyError) as exc:
        return _fail(EXIT_VALIDATION, "validation", str(exc))
    print(json.dumps(result, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
