"""Transfer experiments: ASR bookkeeping, crafting and the named studies.

Every study takes a :class:`Lab` (a trained zoo plus the clean-correct image
set) and returns a :class:`TransferReport`. Adversarial images are crafted in
fixed chunks of ``CHUNK`` images; ``jobs`` only decides how many worker
processes share those chunks, so reports are byte-identical for any ``jobs``.
"""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from . import models as M
from .attacks import AttackConfig, dual_attack, ten_patch_stacking
from .errors import ConfigError

CHUNK = 16
DEFAULT_BUDGET = 256
CSV_HEADER = ["surrogate", "victim", "attack", "eps255", "iters", "T", "lambda", "pna", "sign",
              "seed", "n_images", "n_success", "asr"]

# (PatchOut, L2, PNA) in table order: baseline, singles, pairs, all-on
ABLATION_COMBOS = [
    (False, False, False),
    (True, False, False),
    (False, True, False),
    (False, False, True),
    (True, True, False),
    (False, True, True),
    (True, True, True),
]
T_FRACTIONS = (1 / 16, 1 / 4, 1 / 2, 2 / 3, 5 / 6, 1.0)
LAMBDAS = (0.001, 0.01, 0.1, 1.0, 10.0)
STAGES = (1, 2, 4, 8)


# -- reports --------------------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    surrogate: str
    victim: str
    attack: str
    cfg_digest: str
    eps255: float
    iters: int
    T: int
    lam: float
    pna: str
    sign: bool
    seed: int
    n_images: int
    n_success: int

    @property
    def asr(self) -> float:
        return 100.0 * self.n_success / self.n_images

    def csv_fields(self) -> list:
        return [self.surrogate, self.victim, self.attack, _num(self.eps255), self.iters, self.T,
                _num(self.lam), self.pna, int(self.sign), self.seed, self.n_images,
                self.n_success, repr(self.asr)]


def _num(v: float) -> str:
    v = float(v)
    return str(int(v)) if v == int(v) else repr(v)


@dataclass
class TransferReport:
    kind: str
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def filter(self, **kw) -> list:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in kw.items())]

    def attacks(self) -> list:
        return list(dict.fromkeys(r.attack for r in self.rows))

    def mean_asr(self, attack: str, victims=None, surrogate: str | None = None) -> float:
        rows = [r for r in self.filter(attack=attack)
                if (victims is None or r.victim in victims)
                and (surrogate is None or r.surrogate == surrogate)]
        if not rows:
            raise ConfigError(f"no rows for attack {attack!r}")
        return float(np.mean([r.asr for r in rows]))

    def digest(self) -> str:
        return hashlib.sha256(self.to_csv().encode()).hexdigest()[:12]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in self.rows:
            w.writerow(r.csv_fields())
        return buf.getvalue()

    def to_json(self) -> str:
        body = {"kind": self.kind, "metadata": self.metadata,
                "rows": [dict(surrogate=r.surrogate, victim=r.victim, attack=r.attack,
                              cfg_digest=r.cfg_digest, n_images=r.n_images,
                              n_success=r.n_success, asr=r.asr) for r in self.rows]}
        return json.dumps(body, indent=1, sort_keys=True) + "\n"

    def write(self, out_dir) -> tuple[str, str]:
        """Write ``<kind>_seed<seed>_<digest>.csv`` and its JSON sidecar."""
        os.makedirs(out_dir, exist_ok=True)
        stem = f"{self.kind}_seed{self.metadata.get('seed', 0)}_{self.metadata.get('config_digest', 'na')}"
        csv_path = os.path.join(out_dir, stem + ".csv")
        json_path = os.path.join(out_dir, stem + ".json")
        with open(csv_path, "w", newline="") as f:
            f.write(self.to_csv())
        with open(json_path, "w") as f:
            f.write(self.to_json())
        return csv_path, json_path


def compute_asr(victim, x_adv, labels) -> float:
    """Percentage of ``x_adv`` the victim does not label correctly."""
    return 100.0 * _successes(victim, x_adv, labels) / len(labels)


def _successes(victim, x_adv, labels) -> int:
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ConfigError("cannot compute ASR on an empty image set")
    return int(np.sum(M.predict(victim, x_adv) != labels))


def compute_masr(report: TransferReport, victim: str, attack: str | None = None) -> float:
    """Mean ASR against ``victim`` over all surrogates other than itself."""
    rows = [r for r in report.rows if r.victim == victim and r.surrogate != victim
            and (attack is None or r.attack == attack)]
    if not rows:
        raise ConfigError(f"no transfer rows for victim {victim!r}")
    return float(np.mean([r.asr for r in rows]))


# -- the lab: zoo plus shared clean-correct images ---------------------------------------


@dataclass
class Lab:
    seed: int
    models: list
    images: np.ndarray
    labels: np.ndarray
    image_ids: np.ndarray
    dataset_digest: str = ""

    def model(self, label: str):
        for m in self.models:
            if m.label == label:
                return m
        raise ConfigError(f"no model labelled {label!r} in the zoo")

    @property
    def surrogates(self) -> list:
        return [m for m in self.models if m.label.startswith("S")]

    @property
    def vits(self) -> list:
        return [m for m in self.models if m.kind == "vit"]

    def zoo_digest(self) -> str:
        h = hashlib.sha256()
        for m in self.models:
            h.update(m.digest().encode())
        return h.hexdigest()[:16]


def clean_correct(models, dataset, budget: int = DEFAULT_BUDGET):
    """First ``budget`` eval images (by index) that every model classifies correctly."""
    ok = np.ones(len(dataset), dtype=bool)
    for m in models:
        ok &= M.predict(m, dataset.images) == dataset.labels
    ids = np.flatnonzero(ok)[:budget]
    return dataset.images[ids], dataset.labels[ids], ids


def make_lab(seed: int, models, evaluation, budget: int = DEFAULT_BUDGET) -> Lab:
    x, y, ids = clean_correct(models, evaluation, budget)
    if len(ids) == 0:
        raise ConfigError("no eval image is classified correctly by every model")
    return Lab(seed, list(models), x, y, ids, evaluation.digest())


# -- crafting ---------------------------------------------------------------------


def _craft_chunk(task):
    surrogate, x, y, ids, cfg, stages, per_stage = task
    if stages is None:
        return dual_attack(surrogate, x, y, cfg, image_ids=ids)[0]
    return ten_patch_stacking(surrogate, x, y, stages, cfg, per_stage, image_ids=ids)[0]


def _run_tasks(tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [_craft_chunk(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(jobs, len(tasks)), initializer=_single_thread_blas) as ex:
        return list(ex.map(_craft_chunk, tasks))


def _single_thread_blas():
    from threadpoolctl import threadpool_limits

    threadpool_limits(1)


def craft_many(requests, lab: Lab, jobs: int = 1) -> list:
    """Craft adversarial sets for ``(surrogate, cfg, stages, per_stage)`` requests.

    Every request is cut into the same fixed chunks and all chunks of all
    requests go through one worker pool.
    """
    tasks, spans = [], []
    n = len(lab.labels)
    for surrogate, cfg, stages, per_stage in requests:
        start = len(tasks)
        for i in range(0, n, CHUNK):
            sl = slice(i, i + CHUNK)
            tasks.append((surrogate, lab.images[sl], lab.labels[sl], lab.image_ids[sl], cfg,
                          stages, per_stage))
        spans.append((start, len(tasks)))
    out = _run_tasks(tasks, jobs)
    return [np.concatenate(out[a:b]) for a, b in spans]


def craft(surrogate, lab: Lab, cfg: AttackConfig, jobs: int = 1) -> np.ndarray:
    return craft_many([(surrogate, cfg, None, 10)], lab, jobs)[0]


def _pna_label(cfg: AttackConfig) -> str:
    if cfg.attention_chunks is not None:
        return "".join("0" if on else "1" for on in cfg.attention_chunks)
    return "all" if cfg.use_pna else "none"


def _row(lab, surrogate, victim, cfg, x_adv, name=None):
    n_patches = surrogate.config.num_patches if surrogate.kind == "vit" else 0
    return ReportRow(
        surrogate=surrogate.label, victim=victim.label, attack=name or cfg.name or cfg.digest(),
        cfg_digest=cfg.digest(), eps255=round(cfg.epsilon * 255, 6), iters=cfg.iterations,
        T=cfg.effective_patch_count(n_patches), lam=cfg.lam if cfg.use_l2 else 0.0,
        pna=_pna_label(cfg), sign=cfg.sign_step, seed=lab.seed, n_images=len(lab.labels),
        n_success=_successes(victim, x_adv, lab.labels))


def _metadata(lab: Lab, cfgs, **extra) -> dict:
    configs = {}
    for c in cfgs:
        configs[c.name or c.digest()] = dict(c.to_dict(), digest=c.digest())
    blob = json.dumps(configs, sort_keys=True) + lab.zoo_digest() + json.dumps(extra, sort_keys=True)
    meta = dict(seed=lab.seed, version=__version__, dataset_digest=lab.dataset_digest,
                zoo_digest=lab.zoo_digest(), models={m.label: m.digest() for m in lab.models},
                n_images=int(len(lab.labels)), configs=configs,
                config_digest=hashlib.sha256(blob.encode()).hexdigest()[:12])
    meta.update(extra)
    return meta


def _check_names(cfgs):
    names = [c.name for c in cfgs]
    if any(not n for n in names) or len(set(names)) != len(names):
        raise ConfigError("attack configs need distinct non-empty names")


# -- studies ----------------------------------------------------------------------


def run_transfer_matrix(lab: Lab, cfgs, surrogates=None, jobs: int = 1, whitebox: bool = False):
    """Every surrogate x attack, evaluated on every other zoo model.

    With ``whitebox=True`` the surrogate-on-itself rows are emitted instead.
    """
    _check_names(cfgs)
    surrogates = lab.surrogates if surrogates is None else surrogates
    pairs = [(s, c) for s in surrogates for c in cfgs]
    advs = craft_many([(s, c, None, 10) for s, c in pairs], lab, jobs)
    rows = []
    for (s, c), xa in zip(pairs, advs):
        victims = [s] if whitebox else [m for m in lab.models if m.label != s.label]
        rows.extend(_row(lab, s, v, c, xa) for v in victims)
    kind = "whitebox" if whitebox else "transfer"
    return TransferReport(kind, rows, _metadata(lab, cfgs, surrogates=[s.label for s in surrogates]))


def ablation_configs(base: AttackConfig | None = None) -> list:
    base = base or AttackConfig.bim()
    out = []
    for patchout, l2, pna in ABLATION_COMBOS:
        parts = [n for n, on in (("PatchOut", patchout), ("L2", l2), ("PNA", pna)) if on]
        out.append(base.replace(use_patchout=patchout, use_l2=l2, use_pna=pna,
                                name="+".join(parts) or "BIM"))
    return out


def run_ablation(lab: Lab, surrogates=None, jobs: int = 1, base: AttackConfig | None = None):
    """The seven {PatchOut, L2, PNA} combinations as a transfer matrix."""
    report = run_transfer_matrix(lab, ablation_configs(base), surrogates, jobs)
    report.kind = "ablation"
    return report


def family_means(report: TransferReport, lab: Lab) -> dict:
    """``{attack: {"vit": mean ASR, "cnn": mean ASR}}`` over transfer rows."""
    kinds = {m.label: m.kind for m in lab.models}
    out = {}
    for a in report.attacks():
        rows = [r for r in report.filter(attack=a) if r.victim != r.surrogate]
        out[a] = {k: float(np.mean([r.asr for r in rows if kinds[r.victim] == k]))
                  for k in ("vit", "cnn") if any(kinds[r.victim] == k for r in rows)}
    return out


def pna_path_configs(base: AttackConfig | None = None) -> list:
    """All 8 enable/disable patterns over three chunks; name bit 1 = skipped."""
    base = base or AttackConfig.bim()
    out = []
    for bits in itertools.product((False, True), repeat=3):
        skipped = "".join("1" if b else "0" for b in bits)
        out.append(base.replace(attention_chunks=tuple(not b for b in bits), use_pna=False,
                                name=f"paths-{skipped}"))
    return out


def run_pna_paths(lab: Lab, surrogate, jobs: int = 1, base: AttackConfig | None = None):
    if surrogate.kind != "vit" or surrogate.config.depth % 3:
        raise ConfigError("the path study needs a ViT surrogate whose depth is divisible by 3")
    report = run_transfer_matrix(lab, pna_path_configs(base), [surrogate], jobs)
    report.kind = "pna_paths"
    return report


def run_patch_stacking(lab: Lab, surrogate, stages=STAGES, jobs: int = 1,
                       base: AttackConfig | None = None, patches_per_stage: int = 10):
    """Stacked ten-patch perturbations vs. whole-image BIM at matched iterations.

    Whole-image arm at ``s`` stages: BIM with ``s * I`` iterations and the
    same per-step size as the stacked arm.
    """
    base = base or AttackConfig.bim()
    stages = [int(s) for s in stages]
    if not stages or min(stages) < 1:
        raise ConfigError("stage counts must be positive")
    requests, names = [], []
    for s in stages:
        stacked = base.replace(name=f"stacked-{s}")
        whole = base.replace(iterations=s * base.iterations, step_size=base.alpha, name=f"whole-{s}")
        requests += [(surrogate, stacked, s, patches_per_stage), (surrogate, whole, None, 10)]
        names += [stacked, whole]
    advs = craft_many(requests, lab, jobs)
    rows = []
    for c, xa in zip(names, advs):
        rows.extend(_row(lab, surrogate, v, c, xa) for v in lab.models if v.label != surrogate.label)
    meta = _metadata(lab, names, stages=stages, patches_per_stage=patches_per_stage,
                     surrogates=[surrogate.label])
    return TransferReport("patch_stacking", rows, meta)


def t_grid(num_patches: int, fractions=T_FRACTIONS) -> list:
    return sorted({max(1, min(num_patches, math.ceil(f * num_patches - 1e-9))) for f in fractions})


def sweep_configs(num_patches: int, fractions=T_FRACTIONS, lams=LAMBDAS, base=None,
                  t_with_l2: bool = False) -> tuple[list, list]:
    """T grid (PatchOut, L2 off unless ``t_with_l2``) and lambda grid (PatchOut+L2, default T)."""
    base = base or AttackConfig.bim()
    t_cfgs = [base.replace(use_patchout=True, patch_count=t, use_l2=t_with_l2, name=f"T={t}")
              for t in t_grid(num_patches, fractions)]
    lam_cfgs = [base.replace(use_patchout=True, use_l2=True, lam=float(l), name=f"lambda={l:g}")
                for l in lams]
    return t_cfgs, lam_cfgs


def run_sweeps(lab: Lab, surrogate, fractions=T_FRACTIONS, lams=LAMBDAS, jobs: int = 1,
               base: AttackConfig | None = None, t_with_l2: bool = False):
    t_cfgs, lam_cfgs = sweep_configs(surrogate.config.num_patches, fractions, lams, base, t_with_l2)
    report = run_transfer_matrix(lab, t_cfgs + lam_cfgs, [surrogate], jobs)
    report.kind = "sweep"
    report.metadata["t_grid"] = [c.patch_count for c in t_cfgs]
    report.metadata["lambdas"] = [c.lam for c in lam_cfgs]
    return report


def vit_victim_mean(report: TransferReport, lab: Lab, attack: str) -> float:
    """Mean ASR of ``attack`` over black-box ViT victims (all surrogates pooled)."""
    vits = {m.label for m in lab.vits}
    rows = [r for r in report.filter(attack=attack) if r.victim in vits and r.victim != r.surrogate]
    if not rows:
        raise ConfigError(f"no black-box ViT rows for {attack!r}")
    return float(np.mean([r.asr for r in rows]))


def summarize(values) -> tuple[float, float]:
    """Mean and population standard deviation across seeds."""
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), float(v.std())
