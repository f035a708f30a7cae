"""Command-line interface: ``sotmle simulate | estimate | ate | oracle | bandwidth``.

Every flag can also come from a flat ``key = value`` file given with
``--config`` or from an environment variable ``SOTMLE_<COMMAND>_<FLAG>``.
Explicit flags win over the environment, which wins over the file.
Every file written starts with a comment line recording the tool version,
the master seed and a hash of the effective configuration.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import tempfile

import click
import numpy as np

from . import __version__
from .ate import TreatmentData, ate
from .core import Dataset, NuisancePair
from .estimators import EstimatorConfig, VarianceMode, estimate, scale_outcome, unscale
from .learners import LearnerTarget, LogisticGLM, as_predictor, fit_learner
from .selection import cv_bandwidth
from .simulation import (
    DGPS,
    SimGridConfig,
    compute_oracle_constants,
    format_table,
    oracle_constants,
    run_grid,
    write_metrics_csv,
)
from .targeting import EstimatorName

ESTIMATOR_CHOICES = [e.value for e in EstimatorName]
KERNEL_CHOICES = ["gaussian", "epanechnikov", "gaussian4", "discrete"]
# Keys that do not affect results and are left out of the config hash.
_UNHASHED = {"workers", "out", "table", "config", "verbose"}
DEFAULT_ORACLE_SEED = 20240517
DEFAULT_ORACLE_DRAWS = 10_000_000


class DataFormatError(click.ClickException):
    pass


def _parse_config_file(path):
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise click.BadParameter(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            key = key.replace("-", "_")
            if not key:
                raise click.BadParameter(f"{path}:{lineno}: empty key")
            values[key] = value
    return values


def _load_config(ctx, param, path):
    if path is None:
        return None
    values = _parse_config_file(path)
    # Keys may name the parameter or its long flag.
    names = {}
    for p in ctx.command.params:
        names[p.name] = p
        for opt in getattr(p, "opts", ()):
            if opt.startswith("--"):
                names[opt[2:].replace("-", "_")] = p
    unknown = sorted(set(values) - set(names))
    if unknown:
        raise click.BadParameter(f"unknown keys in config file: {', '.join(unknown)}")
    default_map = dict(ctx.default_map or {})
    for key, value in values.items():
        p = names[key]
        default_map[p.name] = [v.strip() for v in value.split(",")] if getattr(p, "multiple", False) else value
    ctx.default_map = default_map
    return path


def config_option(f):
    return click.option(
        "--config",
        type=click.Path(exists=True, dir_okay=False),
        callback=_load_config,
        is_eager=True,
        expose_value=False,
        help="Flat 'key = value' file; flags override it.",
    )(f)


def estimator_options(multiple=False, default=EstimatorName.TMLE1.value):
    def wrap(f):
        opts = [
            click.option("--kernel", type=click.Choice(KERNEL_CHOICES), default="gaussian", show_default=True),
            click.option(
                "--bandwidth", default="default", show_default=True, help="default | cv | fixed:<h>[,<h>...]"
            ),
            click.option(
                "--fluctuation", type=click.Choice(["covariate", "weighted"]), default="covariate", show_default=True
            ),
            click.option("--trunc-g", type=float, default=0.01, show_default=True),
            click.option("--seed", type=int, default=0, show_default=True),
        ]
        if multiple:
            opts.append(
                click.option(
                    "--estimator",
                    "estimators",
                    type=click.Choice(ESTIMATOR_CHOICES),
                    multiple=True,
                    default=("tmle1", "tmle1star", "tmle2"),
                    show_default=True,
                )
            )
        else:
            opts.append(
                click.option("--estimator", type=click.Choice(ESTIMATOR_CHOICES), default=default, show_default=True)
            )
        for opt in reversed(opts):
            f = opt(f)
        return f

    return wrap


def parse_bandwidth(text):
    text = str(text).strip()
    if text in ("default", "cv"):
        return text
    if text.startswith("fixed:"):
        try:
            values = [float(v) for v in text[len("fixed:") :].split(",")]
        except ValueError:
            raise click.BadParameter(f"cannot read bandwidth {text!r}") from None
        if not values or any(not v > 0 for v in values):
            raise click.BadParameter("fixed bandwidths must be positive")
        return values[0] if len(values) == 1 else tuple(values)
    raise click.BadParameter(f"bandwidth must be default, cv or fixed:<h>, got {text!r}")


def config_hash(params):
    payload = {k: v for k, v in sorted(params.items()) if k not in _UNHASHED}
    blob = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def header_line(seed, params):
    return f"sotmle {__version__} seed={seed} config_hash={config_hash(params)}"


def atomic_write(path, text):
    """Write via a temporary file in the target directory, then rename."""
    if path == "-":
        click.echo(text, nl=False)
        return
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".sotmle-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _number(text, lineno, column):
    try:
        value = float(text)
    except ValueError:
        raise DataFormatError(f"line {lineno}: column {column!r} is not a number: {text!r}") from None
    if not math.isfinite(value):
        raise DataFormatError(f"line {lineno}: column {column!r} is not finite")
    return value


def _binary(text, lineno, column):
    if text.strip() not in ("0", "1"):
        raise DataFormatError(f"line {lineno}: column {column!r} must be 0 or 1, got {text!r}")
    return int(text)


def read_data_csv(path, treatment=False):
    """Parse the data schema: ``w1..wd``, ``a``, ``y`` (empty when a = 0), optional ``t``.

    Returns a dict with ``w``, ``a``, ``y`` and ``t`` (``a`` or ``t`` may be
    ``None`` when the column is absent). Line numbers in errors count the
    header as line 1.
    """
    with open(path, newline="") as fh:
        rows = [(lineno, row) for lineno, row in enumerate(csv.reader(fh), start=1) if row and not row[0].startswith("#")]
    if not rows:
        raise DataFormatError("empty data file")
    header_lineno, header = rows[0]
    header = [h.strip() for h in header]
    wcols = sorted((c for c in header if c.startswith("w") and c[1:].isdigit()), key=lambda c: int(c[1:]))
    if not wcols or wcols != [f"w{j}" for j in range(1, len(wcols) + 1)]:
        raise DataFormatError(f"line {header_lineno}: covariate columns must be w1..wd")
    extra = sorted(set(header) - set(wcols) - {"a", "y", "t"})
    if extra:
        raise DataFormatError(f"line {header_lineno}: unknown columns {', '.join(extra)}")
    if "y" not in header:
        raise DataFormatError(f"line {header_lineno}: missing column 'y'")
    if treatment and "t" not in header:
        raise DataFormatError(f"line {header_lineno}: treatment mode needs a 't' column")
    if not treatment and "a" not in header:
        raise DataFormatError(f"line {header_lineno}: missing column 'a'")
    pos = {c: header.index(c) for c in header}
    w, a, y, t = [], [], [], []
    for lineno, row in rows[1:]:
        if len(row) != len(header):
            raise DataFormatError(f"line {lineno}: expected {len(header)} fields, found {len(row)}")
        w.append([_number(row[pos[c]], lineno, c) for c in wcols])
        obs = _binary(row[pos["a"]], lineno, "a") if "a" in pos else 1
        cell = row[pos["y"]].strip()
        if obs == 1 and cell == "":
            raise DataFormatError(f"line {lineno}: missing outcome for observed unit")
        if obs == 0 and cell != "":
            raise DataFormatError(f"line {lineno}: outcome present for unobserved unit")
        a.append(obs)
        y.append(_number(cell, lineno, "y") if obs == 1 else float("nan"))
        if "t" in pos:
            t.append(_binary(row[pos["t"]], lineno, "t"))
    if not w:
        raise DataFormatError("data file has a header but no rows")
    if not any(a):
        raise DataFormatError("all outcomes are missing")
    return {
        "w": np.asarray(w),
        "a": np.asarray(a) if "a" in pos else None,
        "y": np.asarray(y),
        "t": np.asarray(t) if "t" in pos else None,
    }


def _estimator_config(estimator, kernel, bandwidth, fluctuation, trunc_g, seed, boot=None, folds=5):
    variance = VarianceMode.BOOTSTRAP if boot else VarianceMode.INFLUENCE
    return EstimatorConfig(
        estimator=estimator,
        kernel=kernel,
        bandwidth=parse_bandwidth(bandwidth),
        fluctuation=fluctuation,
        trunc_g=trunc_g,
        variance=variance,
        bootstrap_reps=boot or 200,
        cv_folds=folds,
        seed=seed,
    )


def _fmt(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.ndarray):
        return "[" + ", ".join(_fmt(v) for v in value.tolist()) + "]"
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    return str(value)


def _report_text(header, items):
    lines = [f"# {header}"]
    lines.extend(f"{key} = {_fmt(value)}" for key, value in items)
    return "\n".join(lines) + "\n"


def _learner(design):
    terms = tuple(t.strip() for t in design.split(",") if t.strip())
    return LogisticGLM(design=terms)


def _fail(exc):
    raise click.ClickException(str(exc)) from exc


@click.group(context_settings={"auto_envvar_prefix": "SOTMLE", "show_default": True})
@click.version_option(__version__, prog_name="sotmle")
@click.option("-v", "--verbose", count=True, help="Repeat for more logging.")
def main(verbose):
    """Targeted estimators of a mean outcome missing at random."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@config_option
@click.option("--dgp", type=click.Choice([d.value for d in DGPS]), default="d1")
@click.option("--n", "n_list", type=int, multiple=True, default=(1000,), help="Sample size; repeatable.")
@click.option("--p", "p_grid", type=float, multiple=True, default=(0.5,), help="Outcome-fit rate; repeatable.")
@click.option("--q", "q_grid", type=float, multiple=True, default=(0.5,), help="Score-fit rate; repeatable.")
@click.option("--reps", type=int, default=1000)
@click.option("--coverage", type=click.Choice(["mc", "bound"]), default="mc")
@click.option("--draws", type=click.Choice(["unit", "single"]), default="unit", help="Perturbation draws per unit or shared.")
@click.option("--workers", type=int, default=1, help="Worker processes; does not change results.")
@click.option("--out", type=click.Path(dir_okay=False), default="-", help="Metrics CSV path or '-'.")
@click.option("--table", type=click.Path(dir_okay=False), default=None, help="Also write a text table here.")
@estimator_options(multiple=True)
def simulate(dgp, n_list, p_grid, q_grid, reps, coverage, draws, workers, out, table, estimators, kernel, bandwidth,
             fluctuation, trunc_g, seed):
    """Monte Carlo study over a grid of sample sizes and degradation rates."""
    params = dict(click.get_current_context().params)
    try:
        config = SimGridConfig(
            dgp=dgp,
            n_list=tuple(int(n) for n in n_list),
            p_grid=tuple(float(p) for p in p_grid),
            q_grid=tuple(float(q) for q in q_grid),
            replicates=reps,
            estimators=tuple(estimators),
            master_seed=seed,
            kernel=kernel,
            bandwidth=parse_bandwidth(bandwidth),
            fluctuation=fluctuation,
            trunc_g=trunc_g,
            coverage_mode=coverage,
            draws=draws,
        )
        frozen = oracle_constants(dgp)
        rows = run_grid(config, workers=workers)
    except (ValueError, KeyError, RuntimeError) as exc:
        _fail(exc)
    header = [
        header_line(seed, params),
        f"oracle psi0={frozen['psi0']!r} bound={frozen['bound']!r} M={frozen['M']} oracle_seed={frozen['seed']}",
    ]
    buf = io.StringIO()
    write_metrics_csv(rows, buf, header)
    atomic_write(out, buf.getvalue())
    if table is not None:
        atomic_write(table, f"# {header[0]}\n" + format_table(rows))
    flagged = [r for r in rows if r.flagged]
    if flagged:
        raise click.ClickException(f"{len(flagged)} cell(s) exceeded the replicate failure limit")


@main.command("estimate")
@config_option
@click.argument("data", type=click.Path(exists=True, dir_okay=False))
@click.option("--q-design", default="1,w", help="Outcome GLM terms, comma separated.")
@click.option("--g-design", default="1,w", help="Score GLM terms, comma separated.")
@click.option("--boot", type=int, default=None, help="Bootstrap replicates (variance by bootstrap).")
@click.option("--folds", type=int, default=5, help="Folds for --bandwidth cv.")
@click.option("--out", type=click.Path(dir_okay=False), default="-")
@estimator_options()
def estimate_cmd(data, q_design, g_design, boot, folds, out, estimator, kernel, bandwidth, fluctuation, trunc_g, seed):
    """Estimate the mean outcome from a CSV file."""
    params = dict(click.get_current_context().params)
    parsed = read_data_csv(data)
    try:
        y = parsed["y"]
        binary = bool(np.all(np.isin(y[np.isfinite(y)], (0.0, 1.0))))
        y_scaled, lo, hi = (y, 0.0, 1.0) if binary else scale_outcome(y)
        dataset = Dataset(parsed["w"], parsed["a"], y_scaled)
        config = _estimator_config(estimator, kernel, bandwidth, fluctuation, trunc_g, seed, boot, folds)
        q = fit_learner(_learner(q_design), dataset, LearnerTarget.OUTCOME_GIVEN_OBSERVED)
        g = fit_learner(_learner(g_design), dataset, LearnerTarget.MISSINGNESS)
        report = estimate(dataset, NuisancePair(as_predictor(q), as_predictor(g), trunc_g), config)
    except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        _fail(exc)
    span = hi - lo
    items = [
        ("estimator", report.estimator_name.lower()),
        ("n", report.n),
        ("psi", unscale(report.psi, lo, hi)),
        ("se", report.se * span),
        ("ci_lower", unscale(report.ci_lower, lo, hi)),
        ("ci_upper", unscale(report.ci_upper, lo, hi)),
        ("psi_scaled", report.psi),
        ("y_min", lo),
        ("y_max", hi),
        ("variance", config.variance.value),
        ("epsilon", report.epsilon),
        ("score_residuals", report.score_residuals),
        ("bandwidth", "none" if report.bandwidth_used is None else report.bandwidth_used),
        ("kernel", report.kernel),
    ]
    items.extend((f"flag.{k}", v) for k, v in sorted(report.flags.items()))
    atomic_write(out, _report_text(header_line(seed, params), items))


@main.command("ate")
@config_option
@click.argument("data", type=click.Path(exists=True, dir_okay=False))
@click.option("--q-design", default="1,w")
@click.option("--g-design", default="1,w")
@click.option("--boot", type=int, default=None)
@click.option("--folds", type=int, default=5)
@click.option("--out", type=click.Path(dir_okay=False), default="-")
@estimator_options()
def ate_cmd(data, q_design, g_design, boot, folds, out, estimator, kernel, bandwidth, fluctuation, trunc_g, seed):
    """Average treatment effect from a CSV file with a treatment column 't'."""
    params = dict(click.get_current_context().params)
    parsed = read_data_csv(data, treatment=True)
    try:
        tdata = TreatmentData(parsed["w"], parsed["t"], parsed["y"], parsed["a"])
        config = _estimator_config(estimator, kernel, bandwidth, fluctuation, trunc_g, seed, boot, folds)
        result = ate(tdata, config, _learner(q_design), _learner(g_design))
    except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        _fail(exc)
    items = [
        ("estimator", estimator),
        ("n", tdata.n),
        ("psi1", result.psi1),
        ("psi0", result.psi0),
        ("diff", result.diff),
        ("se", result.se),
        ("ci_lower", result.ci_lower),
        ("ci_upper", result.ci_upper),
        ("se_treated", result.report_treated.se),
        ("se_control", result.report_control.se),
        ("y_min", result.y_min),
        ("y_max", result.y_max),
        ("variance", config.variance.value),
    ]
    if result.bootstrap_failures is not None:
        items.append(("bootstrap_failures", result.bootstrap_failures))
    atomic_write(out, _report_text(header_line(seed, params), items))


def _default_oracle_path():
    return os.path.join(os.path.dirname(__file__), "data", "oracle_constants.json")


@main.command()
@config_option
@click.option("--dgp", "dgps", type=click.Choice([d.value for d in DGPS]), multiple=True, default=("d1", "d3"))
@click.option("--draws", "M", type=int, default=DEFAULT_ORACLE_DRAWS)
@click.option("--seed", type=int, default=DEFAULT_ORACLE_SEED)
@click.option("--out", type=click.Path(dir_okay=False), default=None, help="Defaults to the packaged constants file.")
def oracle(dgps, M, seed, out):
    """Recompute the true parameter and efficiency bound of each design."""
    try:
        table = {name: compute_oracle_constants(name, M, seed) for name in dgps}
    except ValueError as exc:
        _fail(exc)
    atomic_write(out or _default_oracle_path(), json.dumps(table, indent=2, sort_keys=True) + "\n")


@main.command()
@config_option
@click.argument("data", type=click.Path(exists=True, dir_okay=False))
@click.option("--estimator", type=click.Choice(["tmle1star", "tmle2"]), default="tmle1star")
@click.option("--kernel", type=click.Choice(KERNEL_CHOICES), default="gaussian")
@click.option("--fluctuation", type=click.Choice(["covariate", "weighted"]), default="covariate")
@click.option("--folds", type=int, default=5)
@click.option("--trunc-g", type=float, default=0.01)
@click.option("--q-design", default="1,w")
@click.option("--g-design", default="1,w")
@click.option("--seed", type=int, default=0)
@click.option("--out", type=click.Path(dir_okay=False), default="-")
def bandwidth(data, estimator, kernel, fluctuation, folds, trunc_g, q_design, g_design, seed, out):
    """Cross-validated bandwidth with the criterion for every candidate."""
    params = dict(click.get_current_context().params)
    parsed = read_data_csv(data)
    try:
        y = parsed["y"]
        binary = bool(np.all(np.isin(y[np.isfinite(y)], (0.0, 1.0))))
        dataset = Dataset(parsed["w"], parsed["a"], y if binary else scale_outcome(y)[0])
        q = fit_learner(_learner(q_design), dataset, LearnerTarget.OUTCOME_GIVEN_OBSERVED)
        g = fit_learner(_learner(g_design), dataset, LearnerTarget.MISSINGNESS)
        nuisance = NuisancePair(as_predictor(q), as_predictor(g), trunc_g)
        result = cv_bandwidth(dataset, nuisance, folds=folds, estimator=estimator, kernel=kernel, seed=seed,
                              fluctuation=fluctuation)
    except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        _fail(exc)
    lines = [f"# {header_line(seed, params)}", f"# selected = {_fmt(result.bandwidth.values)}", "bandwidth,cv_rss,cv_var,cv_bias,criterion"]
    for row in result.table():
        h = " ".join(repr(v) for v in row["bandwidth"])
        lines.append(f"{h},{row['cv_rss']!r},{row['cv_var']!r},{row['cv_bias']!r},{row['criterion']!r}")
    atomic_write(out, "\n".join(lines) + "\n")


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
