"""Command-line front end.

Every subcommand reads an INI config whose ``[study]`` keys mirror
:class:`~currentglm.pipeline.StudyConfig`; flags only override it.  Outputs go
under ``--out`` and are written atomically, each run adding a manifest under
``manifests/``.  Existing intermediate files (currents, bases) are reused when
their recorded inputs still match.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import time
import warnings
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .bases import KINDS, build_basis, load_basis, reconstruction_errors, save_basis
from .errors import ConfigError, CurrentGLMError, DataError, NumericalError
from .geometry import load_mesh, triangle_descriptors
from .ordreg import FitOptions, fit_fixed, fit_mixed, read_dataset, write_dataset, write_model
from .pipeline import (CovariateTable, StudyConfig, StudyData, assemble_features, delta_sweep,
                       loso_cv, make_grid, synthetic_study, write_text_atomic)
from .rkhs import KernelSpec, current_from_mesh, project_to_grid, read_current, write_current
from .synthcorp import write_corpus

log = logging.getLogger("currentglm")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 1, 2, 3
COMMANDS = ("gen-corpus", "project", "basis", "features", "fit", "cv", "report")


# --------------------------------------------------------------------------
# Config


def _parse_scalar(text):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def _convert(key, text, ftype):
    text = text.strip()
    try:
        if ftype == "int":
            return int(text)
        if ftype == "float":
            return float(text)
        if ftype == "bool":
            low = text.lower()
            if low not in configparser.RawConfigParser.BOOLEAN_STATES:
                raise ValueError(text)
            return configparser.RawConfigParser.BOOLEAN_STATES[low]
        if ftype == "tuple":
            return tuple(_parse_scalar(t.strip()) for t in text.split(",") if t.strip())
        return text
    except ValueError:
        raise ConfigError(f"cannot parse value {text!r} as {ftype}", key=key) from None


def load_config(path, overrides=()):
    """StudyConfig from an INI file plus ``key=value`` overrides."""
    types = {f.name: f.type for f in fields(StudyConfig)}
    values = {}
    paths = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        cp = configparser.ConfigParser()
        try:
            cp.read(path)
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from None
        for section in cp.sections():
            for key, text in cp.items(section):
                if section == "paths":
                    paths[key] = text
                    continue
                if key not in types:
                    raise ConfigError(f"unknown key in [{section}] of {path}", key=key)
                values[key] = _convert(key, text, types[key])
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, text = item.split("=", 1)
        key = key.strip()
        if key not in types:
            raise ConfigError("unknown override key", key=key)
        values[key] = _convert(key, text, types[key])
    try:
        cfg = StudyConfig(**values)
    except TypeError as e:
        raise ConfigError(str(e)) from None
    return cfg, paths


def config_hash(cfg: StudyConfig):
    blob = json.dumps(cfg.echo(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# --------------------------------------------------------------------------
# Helpers


class Run:
    """Output layout, timings and the manifest of one invocation."""

    def __init__(self, command, cfg, out, paths, argv):
        self.command = command
        self.cfg = cfg
        self.out = Path(out)
        self.paths = paths
        self.argv = list(argv)
        self.outputs = []
        self.timings = {}
        self._t = time.perf_counter()
        self.out.mkdir(parents=True, exist_ok=True)

    def dir(self, name):
        d = self.out / name
        d.mkdir(parents=True, exist_ok=True)
        return d

    @property
    def corpus_dir(self):
        return Path(self.paths.get("corpus", self.out / "corpus"))

    def record(self, path):
        self.outputs.append(str(Path(path).relative_to(self.out))
                            if Path(path).is_relative_to(self.out) else str(path))

    def tick(self, label):
        now = time.perf_counter()
        self.timings[label] = round(now - self._t, 4)
        self._t = now

    def write_manifest(self, extra=None):
        import matplotlib
        import scipy
        man = {
            "command": self.command,
            "argv": self.argv,
            "config": self.cfg.to_dict(),
            "config_hash": config_hash(self.cfg),
            "master_seed": self.cfg.master_seed,
            "versions": {"currentglm": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__,
                         "matplotlib": matplotlib.__version__},
            "timings_s": self.timings,
            "outputs": sorted(self.outputs),
        }
        if extra:
            man.update(extra)
        path = self.dir("manifests") / f"{self.command}.json"
        write_text_atomic(path, json.dumps(man, indent=2, sort_keys=True) + "\n")
        return path


def _write_json(path, obj):
    write_text_atomic(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_observations(path):
    """Observation table: subject, response, then covariate columns."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"observation table not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows or rows[0][:2] != ["subject", "response"]:
        raise DataError(f"{path}: header must start with 'subject\\tresponse'")
    names = tuple(rows[0][2:])
    subj, resp, X = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(rows[0]):
            raise DataError(f"{path}:{lineno}: expected {len(rows[0])} fields")
        try:
            subj.append(row[0])
            resp.append(int(row[1]))
            X.append([float(v) for v in row[2:]])
        except ValueError:
            raise DataError(f"{path}:{lineno}: malformed value") from None
    return CovariateTable(np.array(subj), np.array(X).reshape(len(subj), len(names)), names,
                          np.array(resp))


def write_observations(table: CovariateTable, path):
    lines = ["\t".join(["subject", "response", *table.names])]
    for s, y, x in zip(table.subjects, table.responses, table.X):
        lines.append("\t".join([s, str(int(y)), *[repr(float(v)) for v in x]]))
    write_text_atomic(path, "\n".join(lines) + "\n")


def load_descriptors(corpus_dir):
    man_path = Path(corpus_dir) / "manifest.json"
    if not man_path.is_file():
        raise DataError(f"corpus manifest not found: {man_path} (run gen-corpus first)")
    man = json.loads(man_path.read_text())
    return {e["id"]: triangle_descriptors(load_mesh(Path(corpus_dir) / e["mesh"], label=e["id"]))
            for e in man["subjects"]}


def _file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def load_study(run: Run, bandwidth=None):
    """Study data from the corpus directory, reusing projected currents on disk."""
    desc = load_descriptors(run.corpus_dir)
    table = read_observations(run.corpus_dir / "observations.tsv")
    study = StudyData(desc, table, make_grid(desc, run.cfg))
    bw = run.cfg.bandwidth if bandwidth is None else bandwidth
    study._projected[float(bw)] = project_all(run, study, bw)
    return study


def project_all(run: Run, study: StudyData, bandwidth):
    """Currents for every subject; hash-valid files in ``currents/`` are reused."""
    kernel = KernelSpec(float(bandwidth))
    cdir = run.dir("currents")
    out = {}
    reused = 0
    for sid in study.ids:
        path = cdir / f"{sid}.cur"
        rep = None
        if path.is_file():
            try:
                rep = read_current(path, study.grid)
                if rep.kernel != kernel:
                    rep = None
            except CurrentGLMError:
                rep = None
        if rep is None:
            rep = project_to_grid(current_from_mesh(study.descriptors[sid], kernel, sid),
                                  study.grid)
            write_current(rep, path)
        else:
            reused += 1
        out[sid] = rep
    if reused:
        log.info("reused %d current file(s) from %s", reused, cdir)
    return out


def basis_for(run: Run, study: StudyData, kind, r=None):
    """Global basis of ``kind`` over all subjects; reused from disk when inputs match."""
    r = run.cfg.r_for(kind) if r is None else int(r)
    kernel = KernelSpec(run.cfg.bandwidth)
    currents = study.currents(run.cfg.bandwidth)
    ids = study.ids
    key = hashlib.sha256(json.dumps({
        "kind": kind, "r": r, "bandwidth": kernel.bandwidth, "grid": study.grid.hash,
        "currents": [hashlib.sha256(currents[i].beta.tobytes()).hexdigest() for i in ids],
    }, sort_keys=True).encode()).hexdigest()
    bdir = run.dir("bases")
    npz, keyfile = bdir / f"{kind}.npz", bdir / f"{kind}.key"
    if npz.is_file() and keyfile.is_file() and keyfile.read_text().strip() == key:
        try:
            return load_basis(npz, study.grid), npz
        except CurrentGLMError:
            pass
    basis = build_basis(kind, [currents[i] for i in ids], study.grid, kernel, r)
    save_basis(basis, npz)
    write_text_atomic(keyfile, key + "\n")
    return basis, npz


def _kinds(args, cfg):
    return tuple(args.kind) if getattr(args, "kind", None) else cfg.kinds


def _fit(cfg, data):
    opts = FitOptions(nq=cfg.nq)
    return fit_mixed(data, options=opts) if cfg.model == "mixed" else fit_fixed(data, options=opts)


# --------------------------------------------------------------------------
# Subcommands


def cmd_gen_corpus(run: Run, args):
    syn = synthetic_study(run.cfg)
    run.tick("generate")
    cdir = run.corpus_dir
    cdir.mkdir(parents=True, exist_ok=True)
    run.record(write_corpus(syn.corpus, cdir))
    write_observations(syn.study.table, cdir / "observations.tsv")
    run.record(cdir / "observations.tsv")
    truth = {"thresholds": list(syn.truth.thresholds),
             "scalar_coefs": list(syn.truth.scalar_coefs),
             "covariate_names": list(syn.study.table.names),
             "functional_coefs": list(syn.truth.functional_coefs),
             "functional_basis": {"kind": run.cfg.truth_kind, "r": run.cfg.truth_r,
                                  "bandwidth": run.cfg.bandwidth},
             "random_intercept_sd": syn.truth.random_intercept_sd,
             "oracle_agreement": syn.oracle}
    _write_json(cdir / "truth.json", truth)
    run.record(cdir / "truth.json")
    for m in sorted(cdir.glob("meshes/*.off")):
        run.record(m)
    print(f"wrote {len(syn.corpus.subjects)} subjects, {len(syn.study.table)} observations "
          f"to {cdir}; oracle agreement {syn.oracle['marginal']:.2f}%")


def cmd_project(run: Run, args):
    desc = load_descriptors(run.corpus_dir)
    study = StudyData(desc, CovariateTable(np.array([]), np.zeros((0, 3))), make_grid(desc, run.cfg))
    run.tick("load")
    reps = project_all(run, study, run.cfg.bandwidth)
    run.tick("project")
    worst = max(r.residual for r in reps.values())
    for sid in reps:
        run.record(run.out / "currents" / f"{sid}.cur")
    print(f"projected {len(reps)} currents onto {study.grid.n} grid points "
          f"(max residual {worst:.3g})")
    return {"grid": {"n": study.grid.n, "shape": list(study.grid.shape), "hash": study.grid.hash}}


def cmd_basis(run: Run, args):
    study = load_study(run)
    run.tick("load")
    for kind in _kinds(args, run.cfg):
        basis, path = basis_for(run, study, kind, args.r)
        run.record(path)
        ev = basis.spectrum.eigenvalues
        print(f"{kind}: r = {basis.r}, numerical rank {basis.spectrum.numerical_rank}, "
              f"leading eigenvalues {np.array2string(ev[:basis.r], precision=4)}")
    run.tick("basis")


def cmd_features(run: Run, args):
    study = load_study(run)
    currents = study.currents(run.cfg.bandwidth)
    for kind in _kinds(args, run.cfg):
        basis, _ = basis_for(run, study, kind)
        data = assemble_features(currents, basis, study.table)
        path = run.dir("features") / f"{kind}.tsv"
        write_dataset(data, path)
        np.savetxt(run.dir("features") / f"{kind}_gram.txt", data.hk_gram, fmt="%.17g")
        run.record(path)
        run.record(run.dir("features") / f"{kind}_gram.txt")
        print(f"{kind}: {len(data)} rows x {data.r} features")
    run.tick("features")


def cmd_fit(run: Run, args):
    for kind in _kinds(args, run.cfg):
        fpath = run.out / "features" / f"{kind}.tsv"
        if not fpath.is_file():
            cmd_features(run, argparse.Namespace(kind=[kind]))
        data = read_dataset(fpath)
        G = np.loadtxt(run.out / "features" / f"{kind}_gram.txt", ndmin=2)
        data = replace(data, hk_gram=G)
        model = _fit(run.cfg, data)
        path = run.dir("models") / f"{kind}.json"
        write_model(model, path)
        run.record(path)
        fi = model.fit_info
        sd = "" if model.random_intercept_sd is None else f", sigma_u = {model.random_intercept_sd:.4g}"
        print(f"{kind}: loglik = {fi.loglik:.6g}, converged = {fi.converged}, "
              f"separated = {fi.separated}{sd}")
    run.tick("fit")


def _cv_reports(run: Run, kinds, reuse=False):
    study = None
    reports = {}
    cdir = run.dir("cv")
    for kind in kinds:
        path = cdir / f"{kind}.json"
        if reuse and path.is_file():
            rep = _load_report(path)
            if rep is not None and rep.config == run.cfg.echo():
                reports[kind] = rep
                continue
        if study is None:
            study = load_study(run)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            rep = loso_cv(study, run.cfg, kind)
        if run.cfg.check_leakage and not all(f["leakage_ok"] for f in rep.folds):
            raise NumericalError(f"{kind}: held-out data influenced a fold basis")
        write_text_atomic(path, rep.to_json())
        write_text_atomic(cdir / f"{kind}.txt", rep.format_table())
        write_text_atomic(cdir / f"{kind}_predictions.tsv", rep.predictions_tsv())
        for p in (path, cdir / f"{kind}.txt", cdir / f"{kind}_predictions.tsv"):
            run.record(p)
        reports[kind] = rep
        run.tick(f"cv_{kind}")
    return reports, study


def _load_report(path):
    from .pipeline import CVReport
    try:
        d = json.loads(Path(path).read_text())
        return CVReport(d["kind"], tuple(d["categories"]), np.array(d["confusion"]),
                        d["agreement"], d["n_rows"], d["n_skipped_rows"], d["predictions"],
                        d["folds"], d["skipped"], d["config"])
    except (OSError, KeyError, ValueError):
        return None


def cmd_cv(run: Run, args):
    reports, _ = _cv_reports(run, _kinds(args, run.cfg))
    for rep in reports.values():
        sys.stdout.write(rep.format_table())
        if rep.skipped:
            print(f"  skipped folds: {[s['subject'] for s in rep.skipped]}")


def cmd_report(run: Run, args):
    from . import plotting
    kinds = _kinds(args, run.cfg)
    reports, study = _cv_reports(run, kinds, reuse=True)
    if study is None:
        study = load_study(run)
    rdir = run.dir("report")
    fdir = run.dir("report/figures")
    currents = study.currents(run.cfg.bandwidth)
    spectra, recon = {}, {}
    for kind in kinds:
        basis, _ = basis_for(run, study, kind)
        ev = basis.spectrum.eigenvalues
        spectra[kind] = ev
        recon[kind] = reconstruction_errors([currents[i] for i in study.ids], basis)
    run.tick("bases")
    sweep = [] if args.no_sweep else delta_sweep(study, run.cfg)
    run.tick("delta_sweep")
    oracle = None
    truth_path = run.corpus_dir / "truth.json"
    if truth_path.is_file():
        oracle = json.loads(truth_path.read_text()).get("oracle_agreement")
    lines = ["section\tkey\tvalue"]
    for kind, rep in reports.items():
        lines.append(f"agreement\t{kind}\t{rep.agreement:.2f}")
        lines.append(f"rows\t{kind}\t{rep.n_rows}")
    for s in sweep:
        for kind, a in s["agreement"].items():
            lines.append(f"delta_sweep\t{kind}@gap={s['gap']:g}(N={s['n_points']})\t{a:.2f}")
    for kind, e in recon.items():
        lines.append(f"reconstruction\t{kind}\t" + ",".join(f"{v:.6g}" for v in e))
    if oracle:
        lines.append(f"oracle\tmarginal\t{oracle['marginal']:.2f}")
    write_text_atomic(rdir / "summary.tsv", "\n".join(lines) + "\n")
    summary = {"agreement": {k: r.agreement for k, r in reports.items()},
               "confusion": {k: np.asarray(r.confusion).tolist() for k, r in reports.items()},
               "delta_sweep": sweep, "oracle": oracle,
               "spectra": {k: np.asarray(v).tolist() for k, v in spectra.items()},
               "reconstruction_error": {k: np.asarray(v).tolist() for k, v in recon.items()},
               "grid": {"n": study.grid.n, "gap": study.grid.gap}}
    _write_json(rdir / "summary.json", summary)
    figs = [plotting.plot_confusions(reports, fdir / "confusion.png"),
            plotting.plot_spectra(spectra, fdir / "spectra.png"),
            plotting.plot_reconstruction(recon, fdir / "reconstruction.png")]
    if sweep:
        figs.append(plotting.plot_delta_sweep(sweep, fdir / "delta_sweep.png"))
    for p in [rdir / "summary.tsv", rdir / "summary.json", *figs]:
        run.record(p)
    run.tick("figures")
    sys.stdout.write(Path(rdir / "summary.tsv").read_text())


HANDLERS = {"gen-corpus": cmd_gen_corpus, "project": cmd_project, "basis": cmd_basis,
            "features": cmd_features, "fit": cmd_fit, "cv": cmd_cv, "report": cmd_report}


# --------------------------------------------------------------------------
# Entry point


def build_parser():
    p = argparse.ArgumentParser(prog="currentglm",
                                description="Functional ordinal regression on surface currents.")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="INI config file ([study] keys mirror StudyConfig)")
        sp.add_argument("--out", default="out", help="output directory (default: out)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key; repeatable")
        sp.add_argument("--seed", type=int, help="override master_seed")
        sp.add_argument("--jobs", type=int, help="worker processes (default: available cores)")
        if name in ("basis", "features", "fit", "cv", "report"):
            sp.add_argument("--kind", action="append", choices=KINDS,
                            help="basis kind; repeatable (default: all configured)")
        if name == "basis":
            sp.add_argument("--r", type=int, help="truncation order override")
        if name == "report":
            sp.add_argument("--no-sweep", action="store_true", help="skip the grid-gap sweep")
    return p


def run(argv=None):
    """Execute one subcommand; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"master_seed={args.seed}")
        jobs = args.jobs if args.jobs is not None else (os.cpu_count() or 1)
        overrides.append(f"jobs={max(1, jobs)}")
        cfg, paths = load_config(args.config, overrides)
        r = Run(args.command, cfg, args.out, paths, argv)
        extra = HANDLERS[args.command](r, args)
        r.write_manifest(extra)
        return 0
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as e:
        print(f"numerical error: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
