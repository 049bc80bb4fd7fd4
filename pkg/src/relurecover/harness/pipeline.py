"""Stage functions and the end-to-end run.

Each stage reads its inputs from, and writes its outputs to, one run
directory, so the CLI can execute stages one at a time or all together.
``report.json`` holds only deterministic content; wall-clock timings go
to ``timings.json``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from pathlib import Path

import numpy as np

from ..errors import ConfigError, RecoveryError, StageError
from ..estimate import convergence_curve, estimate_all, estimate_regression, loglog_slope
from ..network import (ReluNetwork, SmoothedSpec, exact_coefficients, load_dataset, load_network,
                       random_network, sample, save_dataset, save_network, smoothed_instance)
from ..recover import RecoveredUnit, RecoveryConfig, good_bias_bound, recover_units
from ..regress import run_algorithm5
from ..tensor import flatten, read_tensor, singular_values, write_tensor
from . import plots
from .config import stage_seeds
from .lemmas import verify_lemmas
from .matching import match_units

log = logging.getLogger(__name__)

NETWORK = "network.json"
DATASET = "dataset.hdata"
ESTIMATE = "estimate.json"
RECOVERED = "recovered.json"
FINAL = "final_network.json"
REGRESS = "regress.json"
MATCH = "match.json"
REPORT = "report.json"
TIMINGS = "timings.json"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def write_json(path, obj):
    Path(path).write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def recovery_config(cfg):
    r = cfg["recovery"]
    return RecoveryConfig(ell=cfg["ell"], eta0=r["eta0"], eta1=r["eta1"], eta1_rel=r["eta1_rel"],
                          eta2=r["eta2"], eta3=r["eta3"], m_max=r["m_max"],
                          direction_modes=r["direction_modes"], max_retries=r["max_retries"],
                          contractions=r["contractions"], good_set_c=r["good_set_c"],
                          noise_factor=r["noise_factor"] if cfg["coefficients"] == "sampled" else None)


class Run:
    """A run directory plus the resolved configuration and stage seeds."""

    def __init__(self, cfg, out_dir=None, threads=None, figures=None):
        out = out_dir or cfg.get("output_dir")
        if out is None:
            raise ConfigError("no output directory given (--out or output_dir)")
        self.cfg = cfg
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.threads = threads or cfg["threads"]
        self.figures = cfg["artifacts"]["figures"] if figures is None else figures
        self.seeds = stage_seeds(cfg["seed"])
        self.timings = {}
        self.artifacts = []

    def path(self, name):
        return self.out / name

    def _record(self, name):
        if name not in self.artifacts:
            self.artifacts.append(name)
        return self.path(name)

    def timed(self, stage, fn, *args):
        start = time.perf_counter()
        try:
            return fn(*args)
        except StageError:
            raise
        except (RecoveryError, ValueError, ArithmeticError, MemoryError, OSError, KeyError) as exc:
            raise StageError(stage, exc) from exc
        finally:
            self.timings[stage] = time.perf_counter() - start

    @property
    def kmax(self):
        return 2 * self.cfg["ell"] + 2

    # --- stages --------------------------------------------------------------

    def generate(self):
        spec = self.cfg["network"]
        if spec["path"]:
            net = load_network(spec["path"])
        else:
            net = random_network(spec["d"], spec["m"], self.seeds["generate"], B=spec["B"],
                                 b_bound=spec["b_bound"], ell=self.cfg["ell"],
                                 sigma_floor=spec["sigma_floor"], a_range=spec["a_range"])
            if spec["fixed_biases"]:
                b = np.array(net.b)
                b[:len(spec["fixed_biases"])] = spec["fixed_biases"]
                net = ReluNetwork(net.a, b, net.W, net.B)
            if spec["smoothing_tau"]:
                net = smoothed_instance(SmoothedSpec(net, spec["smoothing_tau"], self.seeds["smooth"],
                                                     self.cfg["ell"])).network
        save_network(self._record(NETWORK), net)
        return net

    def network(self):
        return load_network(self.path(NETWORK))

    def sample(self, net, persist=None):
        data = sample(net, self.cfg["N"], self.seeds["sample"], self.threads)
        if self.cfg["artifacts"]["dataset"] if persist is None else persist:
            save_dataset(self._record(DATASET), data)
        return data

    def dataset(self):
        return load_dataset(self.path(DATASET))

    def split(self, data):
        first, second = data.halves()
        est = first if self.cfg["estimate_on"] == "first_half" else data
        return est, second

    def estimate(self, net=None, data=None):
        """Coefficients T_0 .. T_{2l+2}; returns (coeffs, noise, summary rows)."""
        exact = exact_coefficients(net, self.kmax) if net is not None else None
        if self.cfg["coefficients"] == "exact":
            if net is None:
                raise ConfigError("exact coefficients need the generating network")
            coeffs, noise = exact, None
            rows = [{"k": k, "N": 0, "stderr_frobenius": 0.0, "frobenius_error_vs_exact": 0.0}
                    for k in coeffs]
        else:
            if self.cfg["estimator"] == "regression":
                reps = estimate_regression(data, self.kmax, exact=exact)
            else:
                reps = estimate_all(data, self.kmax, self.threads)
                if exact is not None:
                    for k, r in reps.items():
                        r.frobenius_error_vs_exact = float(np.linalg.norm(r.tensor - exact[k]))
            coeffs = {k: r.tensor for k, r in reps.items()}
            noise = {k: r.stderr_frobenius for k, r in reps.items()}
            rows = [r.to_dict() for r in reps.values()]
        if self.cfg["artifacts"]["tensors"]:
            for k, T in coeffs.items():
                write_tensor(self._record(f"T_{k}.htnsr"), T)
        summary = {"estimator": self.cfg["estimator"] if noise is not None else "exact",
                   "orders": rows, "noise": noise}
        write_json(self._record(ESTIMATE), summary)
        write_csv(self._record("estimates.csv"), ["k", "N", "stderr_frobenius", "frobenius_error_vs_exact"],
                  [[r["k"], r["N"], r["stderr_frobenius"], r["frobenius_error_vs_exact"]] for r in rows])
        if self.figures:
            plots.estimate_noise(rows, self._record("estimate_noise.png"))
        return coeffs, noise, summary

    def coefficients(self):
        coeffs = {k: read_tensor(self.path(f"T_{k}.htnsr")) for k in range(self.kmax + 1)}
        summary = read_json(self.path(ESTIMATE))
        noise = summary.get("noise")
        noise = None if noise is None else {int(k): v for k, v in noise.items()}
        return coeffs, noise

    def recover(self, coeffs, noise):
        rcfg = recovery_config(self.cfg)
        units, report = recover_units(coeffs, rcfg, self.seeds["recover"], noise=noise,
                                      refine=self.cfg["recovery"]["refine"])
        ell = self.cfg["ell"]
        spectra = {
            f"T_{2 * ell + 1}": singular_values(flatten(coeffs[2 * ell + 1], ell, ell + 1, 0)),
            f"T_{2 * ell + 2}": singular_values(flatten(coeffs[2 * ell + 2], ell, ell + 2, 0)),
        }
        payload = {"config": rcfg.to_dict(), "units": [u.to_dict() for u in units],
                   "directions": report.to_dict(), "spectra": spectra}
        write_json(self._record(RECOVERED), payload)
        if self.figures:
            plots.singular_spectra(spectra, report.eta1, self._record("spectra.png"))
        return units, payload

    def recovered_units(self):
        return [RecoveredUnit.from_dict(u) for u in read_json(self.path(RECOVERED))["units"]]

    def regress(self, data, units, net=None):
        r = self.cfg["regression"]
        B = net.B if net is not None and net.B is not None else self.cfg["network"]["B"]
        m = net.m if net is not None else self.cfg["network"]["m"]
        result = run_algorithm5(data, units, r["eps"], self.seeds["regress"], m=m, B=B, mode=r["mode"],
                                tau=r["tau"], radius=r["radius"], steps=r["steps"], certify=r["certify"],
                                reference=net, n_eval=r["n_eval"])
        save_network(self._record(FINAL), result.network)
        metrics = result.metrics()
        metrics["passes_eps"] = None if result.mse_upper95 is None else bool(result.mse_upper95 <= r["eps"] ** 2)
        write_json(self._record(REGRESS), metrics)
        return result, metrics

    def evaluate(self, net, units):
        match = match_units(net, units).to_dict()
        bound = good_bias_bound(self.cfg["regression"]["eps"], net.m, net.d, net.B or self.cfg["network"]["B"],
                                self.cfg["recovery"]["good_set_c"])
        good = [i for i in range(net.m) if abs(net.b[i]) < bound]
        matched = {i for i, _ in match["pairs"]}
        match["good_bias_bound"] = bound
        match["good_set"] = good
        match["good_set_unmatched"] = [i for i in good if i not in matched]
        write_json(self._record(MATCH), match)
        rows = [[i, j, s, we, be, ae, we + be + ae] for (i, j), s, we, be, ae in
                zip(match["pairs"], match["signs"], match["w_err"], match["b_err"], match["a_err"])]
        write_csv(self._record("summary.csv"), ["true_unit", "recovered_unit", "sign", "w_err", "b_err",
                                                "a_err", "cost"], rows)
        if self.figures and match["pairs"]:
            plots.recovery_errors(match, self._record("recovery_errors.png"))
        return match

    def convergence(self, net):
        """Median error curves for k = 2, 3 over the configured N schedule."""
        schedule = self.cfg["N_schedule"]
        seeds = [self.seeds["estimate"] + i for i in range(5)]
        curves = {k: convergence_curve(net, k, schedule, seeds) for k in (2, 3)}
        slopes = {k: loglog_slope(c) for k, c in curves.items()}
        write_csv(self._record("convergence.csv"), ["k", "N", "median_error"],
                  [[k, n, e] for k, c in curves.items() for n, e in c])
        if self.figures:
            plots.convergence(curves, self._record("convergence.png"))
        return {"curves": curves, "slopes": slopes}

    def finish(self, report):
        write_json(self._record(REPORT), report)
        write_json(self.path(TIMINGS), self.timings)
        return report


def run_pipeline(cfg, out_dir=None, threads=None, figures=None):
    """generate → sample → estimate → recover → regress → evaluate, all artifacts on disk.

    Returns the report dict.  A failing stage is recorded in report.json
    (status "error" with the stage name) and re-raised as StageError; the
    artifacts written so far are kept.
    """
    run = Run(cfg, out_dir, threads, figures)
    report = {"config": cfg, "seeds": run.seeds, "status": "ok"}
    try:
        net = run.timed("generate", run.generate)
        report["network"] = {"d": net.d, "m": net.m, "B": net.B, "a": net.a, "b": net.b,
                             "bound_violations": net.bound_violations()}
        sampled = cfg["coefficients"] == "sampled"
        data = est_data = reg_data = None
        if sampled or cfg["regression"]["enabled"]:
            data = run.timed("sample", run.sample, net)
            est_data, reg_data = run.split(data)
        coeffs, noise, est = run.timed("estimate", run.estimate, net, est_data)
        report["estimate"] = est
        units, rec = run.timed("recover", run.recover, coeffs, noise)
        report["recovery"] = {k: rec[k] for k in ("units", "directions", "config")}
        match = run.timed("evaluate", run.evaluate, net, units)
        report["match"] = match
        if cfg["regression"]["enabled"]:
            _, metrics = run.timed("regress", run.regress, reg_data, units, net)
            report["regression"] = metrics
        if cfg["N_schedule"]:
            report["convergence"] = run.timed("convergence", run.convergence, net)
    except StageError as exc:
        report["status"] = "error"
        report["error"] = {"stage": exc.stage, "message": str(exc.cause)}
        report["artifacts"] = sorted(run.artifacts)
        run.finish(report)
        raise
    report["artifacts"] = sorted(run.artifacts + [REPORT])
    return run.finish(report)


def run_verify_lemmas(out_dir, figures=True, **kw):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = verify_lemmas(**kw).to_dict()
    write_json(out / "lemmas.json", report)
    write_csv(out / "lemmas.csv", ["check", "passed", "worst_margin"],
              [[c["name"], c["passed"], c["worst_margin"]] for c in report["checks"]])
    if figures:
        plots.lemma_margins(report, out / "lemma_margins.png")
    return report
