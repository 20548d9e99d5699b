"""Monte-Carlo harness and command-line interface.

Trial ``t`` draws its channels from a Philox stream keyed by ``(seed, t)``,
so results do not depend on worker scheduling, and every beta of a sweep
reuses the same draw.
"""
import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import oracle
from .builders import (BASELINE, HIGH_RANK, INFEASIBLE, PLAIN, RANK_ONE, RESTRICTED1,
                       RESTRICTED2, SOLVER_FAILURE, BeamformingInstance, db_to_linear,
                       solve_design)
from .channel import (UncertaintyRegion, generate_codebook, generate_estimate, load_codebook,
                      quantize, save_codebook)
from .sdp_core import SolverSettings

log = logging.getLogger(__name__)

POLICIES = ("auto", PLAIN, RESTRICTED1, RESTRICTED2)
RECORD_HEADER = ["trial", "beta", "status", "objective", "extracted_power", "eig_ratio_max",
                 "relaxation_used", "verify_pass", "wall_time_ms"]
SUMMARY_HEADER = ["beta", "avg_power", "avg_power_db", "feasibility_rate", "rankone_restricted",
                  "rankone_plain", "n_feasible"]
CODEBOOK_STREAM = 0xC0DE  # spawn key separating the codebook from trial streams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    n_t: int = 8
    k_users: int = 5
    sigma2: float = 0.01
    gamma_db: float = 5.0
    epsilon: float = 0.04 * math.sqrt(2)
    beta_list: tuple = (0.0, 0.1, 0.2, 0.3, 0.4)
    trials: int = 100
    seed: int = 0
    # path to a codebook file, or {"size": M, "sweeps": S, "seed": optional}
    codebook: object = field(default_factory=lambda: {"size": 64, "sweeps": 50})
    relaxation: str = "auto"
    solver: SolverSettings = field(default_factory=SolverSettings)
    verify: bool = False
    samples_verify: int = 10_000
    # wall times vary between runs; left empty unless asked for
    record_timing: bool = False

    def __post_init__(self):
        object.__setattr__(self, "beta_list", tuple(float(b) for b in self.beta_list))
        if isinstance(self.solver, dict):
            object.__setattr__(self, "solver", SolverSettings(**self.solver))
        self.validate()

    def validate(self):
        if self.n_t < 1 or self.k_users < 1:
            raise ConfigError("n_t and k_users must be positive")
        if self.trials < 1:
            raise ConfigError("trials must be at least 1")
        if not self.beta_list:
            raise ConfigError("beta_list must not be empty")
        if min(self.beta_list) < 0 or list(self.beta_list) != sorted(self.beta_list):
            raise ConfigError("beta_list must be nonnegative and sorted ascending")
        if not 0 < self.epsilon <= math.sqrt(2):
            raise ConfigError("epsilon must lie in (0, sqrt(2)]")
        if not self.sigma2 > 0:
            raise ConfigError("sigma2 must be positive")
        if self.relaxation not in POLICIES:
            raise ConfigError(f"relaxation must be one of {', '.join(POLICIES)}")
        if not 0 <= int(self.seed) < 2 ** 64 or int(self.seed) != self.seed:
            raise ConfigError("seed must be an integer in [0, 2^64)")
        if self.samples_verify < 1:
            raise ConfigError("samples_verify must be positive")
        if not isinstance(self.codebook, (str, dict)):
            raise ConfigError("codebook must be a file path or generator settings")
        if isinstance(self.codebook, dict):
            unknown = set(self.codebook) - {"size", "sweeps", "seed"}
            if unknown:
                raise ConfigError(f"unknown codebook keys: {', '.join(sorted(unknown))}")

    @property
    def gamma(self):
        return float(db_to_linear(self.gamma_db))

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, path):
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(data)

    def to_dict(self):
        out = asdict(self)
        out["beta_list"] = list(self.beta_list)
        return out


@dataclass(frozen=True)
class TrialRecord:
    trial_index: int
    beta: float
    status: str
    objective: float
    extracted_power: object
    eig_ratio_max: float
    relaxation_used: str
    verify_pass: object
    wall_time_ms: float


def trial_rng(seed, trial):
    """Counter-based stream for one trial."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(trial)])))


def make_codebook(config):
    cb_cfg = config.codebook
    if isinstance(cb_cfg, str):
        cb = load_codebook(cb_cfg)
        if cb.dim != config.n_t:
            raise ConfigError(f"codebook dimension {cb.dim} does not match n_t = {config.n_t}")
        return cb
    seed = cb_cfg.get("seed", config.seed)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), CODEBOOK_STREAM])))
    return generate_codebook(config.n_t, int(cb_cfg.get("size", 64)), rng, sweeps=int(cb_cfg.get("sweeps", 50)))


def draw_trial(config, codebook, trial):
    """Quantized feedback of every user for one trial (same for every beta)."""
    rng = trial_rng(config.seed, trial)
    draws = [quantize(generate_estimate(rng, config.n_t), codebook) for _ in range(config.k_users)]
    return draws, rng


def trial_instance(config, draws, beta):
    regions = [d.region(config.epsilon, beta) for d in draws]
    return BeamformingInstance.from_db(config.n_t, config.sigma2, config.gamma_db, regions)


def run_trial(config, codebook, trial):
    draws, rng = draw_trial(config, codebook, trial)
    out = []
    for beta in config.beta_list:
        inst = trial_instance(config, draws, beta)
        t0 = time.perf_counter()
        res = solve_design(inst, config.relaxation, config.solver)
        verdict = None
        if config.verify and res.status == RANK_ONE:
            try:
                verdict, _ = oracle.verify_robust_feasibility(res.beamformers, inst,
                                                              n_samples=config.samples_verify,
                                                              rng=rng, settings=config.solver)
            except oracle.OracleSolverError as exc:
                log.warning("trial %d beta %g: verification failed: %s", trial, beta, exc)
        ms = (time.perf_counter() - t0) * 1e3
        out.append(TrialRecord(trial, beta, res.status, res.objective, res.extracted_power,
                               res.eig_ratio_max, res.relaxation, verdict,
                               ms if config.record_timing else None))
        if res.status == SOLVER_FAILURE:
            log.warning("trial %d beta %g: solver failure (%s)", trial, beta, res.solver_status)
    return out


def _run_chunk(args):
    config, codebook, trials = args
    return [rec for t in trials for rec in run_trial(config, codebook, t)]


def worker_count():
    cap = os.environ.get("ROBUSTBF_THREADS")
    n = os.cpu_count() or 1
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            raise ConfigError("ROBUSTBF_THREADS must be an integer") from None
    return n


def run_montecarlo(config, codebook=None, workers=None):
    """Solve every (trial, beta) pair; records sorted by trial then beta."""
    config.validate()
    if codebook is None:
        codebook = make_codebook(config)
    workers = workers or worker_count()
    trials = list(range(config.trials))
    if workers <= 1 or config.trials == 1:
        records = _run_chunk((config, codebook, trials))
    else:
        chunks = [trials[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = [r for part in pool.map(_run_chunk, [(config, codebook, c) for c in chunks])
                       for r in part]
    order = {b: i for i, b in enumerate(config.beta_list)}
    return sorted(records, key=lambda r: (r.trial_index, order[r.beta]))


# ----------------------------------------------------------------------------
# summaries and CSV


@dataclass(frozen=True)
class SummaryRow:
    beta: float
    avg_power: float
    feasibility_rate: float
    rankone_restricted: int
    rankone_plain: int
    n_feasible: int
    n_failure: int

    @property
    def avg_power_db(self):
        return 10 * math.log10(self.avg_power) if self.avg_power > 0 else float("nan")

    @property
    def counts(self):
        """``rank-one(restricted)/rank-one(plain)/feasible``."""
        return f"{self.rankone_restricted}/{self.rankone_plain}/{self.n_feasible}"


def summarize(records):
    if not records:
        raise ValueError("no records to summarize")
    groups = {}
    for r in records:
        groups.setdefault(r.beta, []).append(r)
    rows = []
    for beta in sorted(groups):
        recs = groups[beta]
        feas = [r for r in recs if r.status in (RANK_ONE, HIGH_RANK)]
        fails = sum(r.status == SOLVER_FAILURE for r in recs)
        denom = len(recs) - fails
        rows.append(SummaryRow(
            beta=beta,
            avg_power=float(np.mean([r.objective for r in feas])) if feas else float("nan"),
            feasibility_rate=len(feas) / denom if denom else float("nan"),
            rankone_restricted=sum(r.status == RANK_ONE for r in recs),
            rankone_plain=sum(r.status == RANK_ONE and r.relaxation_used in (PLAIN, BASELINE)
                              for r in recs),
            n_feasible=len(feas),
            n_failure=fails,
        ))
    return rows


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "" if math.isnan(x) else f"{float(x):.12g}"
    return str(x)


def records_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RECORD_HEADER)
    for r in records:
        w.writerow([_fmt(v) for v in (r.trial_index, r.beta, r.status, r.objective, r.extracted_power,
                                        r.eig_ratio_max, r.relaxation_used, r.verify_pass,
                                        r.wall_time_ms)])
    return buf.getvalue()


def summary_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for s in rows:
        w.writerow([_fmt(v) for v in (s.beta, s.avg_power, s.avg_power_db, s.feasibility_rate,
                                        s.rankone_restricted, s.rankone_plain, s.n_feasible)])
    return buf.getvalue()


def format_rankone_table(rows):
    lines = ["beta    a/b/c"]
    lines += [f"{s.beta:<7g} {s.counts}" for s in rows]
    return "\n".join(lines)


# ----------------------------------------------------------------------------
# instance files


def _complex_vector(data, what):
    try:
        arr = np.array(data, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{what}: expected a list of [re, im] pairs") from None
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ConfigError(f"{what}: expected a list of [re, im] pairs")
    return arr[:, 0] + 1j * arr[:, 1]


def _pairs(v):
    return [[float(z.real), float(z.imag)] for z in np.asarray(v, dtype=complex)]


def instance_from_dict(data):
    """Instance from JSON: explicit ``users`` or the experiment fields plus ``trial``/``beta``."""
    if "users" in data:
        users = data["users"]
        if not isinstance(users, list) or not users:
            raise ConfigError("users must be a nonempty list")
        regions = []
        for k, u in enumerate(users):
            try:
                regions.append(UncertaintyRegion(float(u["alpha"]), _complex_vector(u["h_q"], f"user {k} h_q"),
                                                 float(u["epsilon"]), float(u["beta"])))
            except KeyError as exc:
                raise ConfigError(f"user {k}: missing field {exc}") from None
        n_t = regions[0].n_t
        k = len(regions)
        sigma2 = data.get("sigma2", 0.01)
        if "gamma_db" in data:
            gamma = db_to_linear(np.broadcast_to(data["gamma_db"], (k,)))
        else:
            gamma = np.broadcast_to(data.get("gamma", 1.0), (k,))
        return BeamformingInstance(n_t, tuple(np.broadcast_to(sigma2, (k,))), tuple(gamma), tuple(regions))
    rest = {key: v for key, v in data.items() if key not in ("trial", "beta", "beamformers")}
    config = ExperimentConfig.from_dict(rest)
    draws, _ = draw_trial(config, make_codebook(config), int(data.get("trial", 0)))
    return trial_instance(config, draws, float(data.get("beta", config.beta_list[0])))


def instance_to_dict(inst):
    return {
        "sigma2": list(inst.sigma2),
        "gamma": list(inst.gamma),
        "users": [{"alpha": r.alpha, "h_q": _pairs(r.h_q), "epsilon": r.epsilon, "beta": r.beta}
                  for r in inst.regions],
    }


def _load_json(path):
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    return data


# ----------------------------------------------------------------------------
# command line


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(1)


def _parser():
    p = _Parser(prog="robustbf", description="Robust downlink beamforming under quantized feedback.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("solve", help="solve one instance and verify it")
    s.add_argument("--config", required=True, help="instance or experiment JSON")
    s.add_argument("--relaxation", choices=POLICIES + (BASELINE,), default="auto")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="write instance and beamformers as JSON")
    s.add_argument("--samples", type=int, default=0, help="sampling cross-check per user")

    m = sub.add_parser("montecarlo", help="run trials and write record and summary CSVs")
    m.add_argument("--config", required=True)
    m.add_argument("--seed", type=int)
    m.add_argument("--records", default="records.csv")
    m.add_argument("--summary", default="summary.csv")

    t = sub.add_parser("table-rankone", help="rank-one counts a/b/c over a beta scan")
    t.add_argument("--config", help="experiment JSON (flags below override it)")
    t.add_argument("--seed", type=int)
    t.add_argument("--n-t", type=int)
    t.add_argument("--k-users", type=int)
    t.add_argument("--gamma-db", type=float)
    t.add_argument("--epsilon", type=float)
    t.add_argument("--betas", type=float, nargs="+")
    t.add_argument("--trials", type=int)
    t.add_argument("--summary", help="also write the summary CSV")

    v = sub.add_parser("verify", help="worst-case check of stored beamformers")
    v.add_argument("--input", required=True, help="JSON with an instance and beamformers")
    v.add_argument("--tol", type=float, default=oracle.VERIFY_TOL)
    v.add_argument("--samples", type=int, default=0)
    v.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("gen-codebook", help="write a Grassmannian codebook file")
    g.add_argument("--n-t", type=int, required=True)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--sweeps", type=int, default=50)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    return p


def _cmd_solve(args):
    data = _load_json(args.config)
    if args.seed is not None:
        data["seed"] = args.seed
    inst = instance_from_dict(data)
    settings = SolverSettings(**data["solver"]) if isinstance(data.get("solver"), dict) else None
    res = solve_design(inst, args.relaxation, settings)
    print(f"status       {res.status}")
    print(f"relaxation   {res.relaxation}")
    if res.status in (INFEASIBLE, SOLVER_FAILURE):
        print(f"solver       {res.solver_status}")
        return 2
    print(f"objective    {res.objective:.9g}")
    print(f"eig_ratio    {res.eig_ratio_max:.3e}")
    for name, val in res.stage_objectives.items():
        print(f"stage        {name} {val:.9g}")
    if res.status == RANK_ONE:
        print(f"power        {res.extracted_power:.9g}")
        rng = trial_rng(data.get("seed", 0), 2 ** 32)
        passed, report = oracle.verify_robust_feasibility(res.beamformers, inst, n_samples=args.samples, rng=rng)
        print(f"verified     {passed}")
        print("\n".join(report.lines()))
    if args.out:
        out = instance_to_dict(inst)
        out["beamformers"] = [_pairs(w) for w in res.beamformers] if res.beamformers else None
        out["status"] = res.status
        out["objective"] = res.objective
        Path(args.out).write_text(json.dumps(out, indent=2) + "\n", encoding="utf-8")
    return 0


def _cmd_montecarlo(args):
    config = ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    records = run_montecarlo(config)
    rows = summarize(records)
    Path(args.records).write_text(records_csv(records), encoding="utf-8")
    Path(args.summary).write_text(summary_csv(rows), encoding="utf-8")
    fails = sum(s.n_failure for s in rows)
    if fails:
        log.warning("%d solver failures excluded from feasibility rates", fails)
    print(format_rankone_table(rows))
    return 0


def _cmd_table(args):
    base = ExperimentConfig.from_json(args.config).to_dict() if args.config else {
        "n_t": 4, "k_users": 3, "gamma_db": 13.0,
        "beta_list": [round(0.02 * i, 2) for i in range(1, 11)]}
    over = {"seed": args.seed, "n_t": args.n_t, "k_users": args.k_users, "gamma_db": args.gamma_db,
            "epsilon": args.epsilon, "beta_list": args.betas, "trials": args.trials}
    base.update({k: v for k, v in over.items() if v is not None})
    base["relaxation"] = "auto"
    config = ExperimentConfig.from_dict(base)
    rows = summarize(run_montecarlo(config))
    print(format_rankone_table(rows))
    if args.summary:
        Path(args.summary).write_text(summary_csv(rows), encoding="utf-8")
    return 0


def _cmd_verify(args):
    data = _load_json(args.input)
    if not data.get("beamformers"):
        raise ConfigError("input holds no beamformers")
    inst = instance_from_dict(data)
    ws = [_complex_vector(w, f"beamformer {k}") for k, w in enumerate(data["beamformers"])]
    passed, report = oracle.verify_robust_feasibility(ws, inst, tol=args.tol, n_samples=args.samples,
                                                      rng=trial_rng(args.seed, 0))
    print(f"verified     {passed}")
    print("\n".join(report.lines()))
    return 0 if passed else 2


def _cmd_codebook(args):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([args.seed, CODEBOOK_STREAM])))
    cb = generate_codebook(args.n_t, args.size, rng, sweeps=args.sweeps)
    save_codebook(cb, args.out)
    print(f"wrote {cb.size} codewords of dimension {cb.dim}, min chordal distance "
          f"{cb.min_chordal_distance():.6f}")
    return 0


COMMANDS = {"solve": _cmd_solve, "montecarlo": _cmd_montecarlo, "table-rankone": _cmd_table,
            "verify": _cmd_verify, "gen-codebook": _cmd_codebook}


def cli(argv=None):
    """Run the command line; returns the exit code."""
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ValueError as exc:
        print(f"robustbf: error: {exc}", file=sys.stderr)
        return 1
    except oracle.OracleSolverError as exc:
        print(f"robustbf: solver failure: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(cli())
