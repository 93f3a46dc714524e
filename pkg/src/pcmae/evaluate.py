"""Reconstruction probes, classification accuracy, few-shot evaluation.

The reconstruction probe masks held-out clouds with one strategy and
scores how well the matching branch rebuilds the hidden patches; GMPC
uses global random masking, LMPC local block masking.  Reports aggregate
per-item values whose mean must reproduce the reported cell exactly.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import DatasetManifest
from .errors import UsageError
from .model import GLOBAL, LOCAL, DualBranchMAE, chamfer_mean
from .patchmask import global_random_mask, local_block_mask, patchify
from .training import TrainConfig, run_finetune

GMPC = "gmpc"  # global random masking probe
LMPC = "lmpc"  # local block masking probe
STRATEGIES = (GMPC, LMPC)


@dataclass
class ProbeReport:
    """One row of the probe table: per-strategy means for one model."""

    model_id: str
    gmpc_cd: float | None = None
    lmpc_cd: float | None = None
    accuracy: float | None = None
    seeds: tuple = ()


def _probe_branch(model: DualBranchMAE, strategy: str, branch: str) -> str:
    """Resolve which branch reconstructs a probe.

    'auto' matches strategy to branch (GMPC -> global, LMPC -> local) and
    falls back to the only branch a single-branch variant has.
    """
    if branch != "auto":
        return branch
    wanted = GLOBAL if strategy == GMPC else LOCAL
    variant = model.variant
    if getattr(variant, f"{wanted}_branch"):
        return wanted
    return LOCAL if variant.local_branch else GLOBAL


def probe_reconstruction(model: DualBranchMAE, dataset, strategy: str,
                         rng: np.random.Generator, r: float | None = None,
                         branch: str = "auto",
                         item_log: list | None = None) -> float:
    """Mean per-cloud reconstruction distance under one masking strategy."""
    strategy = strategy.lower()
    if strategy not in STRATEGIES:
        raise UsageError(f"strategy must be one of {STRATEGIES}, got {strategy!r}")
    if len(dataset) == 0:
        raise UsageError("probe dataset is empty")
    cfg = model.config
    ratio = cfg.mask_ratio if r is None else r
    use_branch = _probe_branch(model, strategy, branch)
    values = []
    with ad.no_grad():
        for i, pc in enumerate(dataset):
            ps = patchify(pc, cfg.patches, cfg.group_size)
            if strategy == GMPC:
                plan = global_random_mask(cfg.patches, ratio, rng)
            else:
                plan = local_block_mask(ps.centers, ratio, rng)
            pred, target = model.reconstruct(ps, plan, use_branch)
            cd = chamfer_mean(pred, target).item()
            values.append(cd)
            if item_log is not None:
                item_log.append({"item": i, "strategy": strategy, "cd": cd})
    return float(np.mean(values))


def write_items_jsonl(path, items) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(item, sort_keys=True) + "\n")


def eval_classification(model, dataset, split: str = "test") -> float:
    """Overall accuracy of argmax predictions on one split.

    ``model`` is either a trained model or any callable mapping a cloud to
    a logits vector; ``dataset`` is a manifest (split selected) or a list
    of labeled clouds.
    """
    if isinstance(dataset, DatasetManifest):
        clouds = dataset.load_split(split)
    else:
        clouds = list(dataset)
    if not clouds:
        raise UsageError(f"no items to evaluate in split {split!r}")
    correct = 0
    with ad.no_grad():
        for pc in clouds:
            if pc.label is None:
                raise UsageError("classification needs labeled clouds")
            if isinstance(model, DualBranchMAE):
                ps = patchify(pc, model.config.patches, model.config.group_size)
                logits = model.classify(ps).data
            else:
                logits = np.asarray(model(pc))
            if int(np.argmax(logits)) == pc.label:
                correct += 1
    return correct / len(clouds)


def finetune_factory(checkpoint, train_config: TrainConfig,
                     model_config=None):
    """Model factory for few-shot episodes: fine-tune a fresh head per call."""

    def factory(support, episode_seed: int):
        tc = TrainConfig(**{**train_config.__dict__, "seed": episode_seed})
        result = run_finetune(checkpoint, support, tc,
                              model_config=model_config)
        return result.model

    return factory


def few_shot_eval(model_factory, manifest: DatasetManifest, n_way: int,
                  m_shot: int, episodes: int = 10,
                  seed: int = 0) -> tuple:
    """Mean and std of accuracy over independently sampled episodes.

    model_factory(support, episode_seed) must return a trained model whose
    classify() covers the episode's n_way labels.
    """
    from .data import few_shot_episode

    if episodes < 1:
        raise UsageError(f"episodes must be >= 1, got {episodes}")
    accs = []
    for e in range(episodes):
        rng = np.random.default_rng([seed, 17, e])
        support, query, _ = few_shot_episode(manifest, n_way, m_shot, rng)
        model = model_factory(support, int(rng.integers(2 ** 31)))
        accs.append(eval_classification(model, query))
    accs = np.asarray(accs)
    return float(accs.mean()), float(accs.std()), accs.tolist()


# -- report emission --------------------------------------------------------

_COLUMNS = ("model", "gmpc_cd", "lmpc_cd", "accuracy", "seeds")


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def report_table(reports) -> tuple:
    """Render probe reports as (csv_text, aligned_text).

    The CSV re-parses to the same values via parse_report_csv; seeds are
    semicolon-separated inside their cell.
    """
    rows = []
    for rep in reports:
        rows.append([
            rep.model_id,
            _cell(rep.gmpc_cd),
            _cell(rep.lmpc_cd),
            _cell(rep.accuracy),
            ";".join(str(s) for s in rep.seeds),
        ])
    buf = io.StringIO()
    buf.write(",".join(_COLUMNS) + "\n")
    for row in rows:
        buf.write(",".join(row) + "\n")
    csv_text = buf.getvalue()
    widths = [max(len(col), *(len(r[i]) for r in rows)) if rows else len(col)
              for i, col in enumerate(_COLUMNS)]
    lines = ["  ".join(col.ljust(widths[i])
                       for i, col in enumerate(_COLUMNS)).rstrip()]
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i])
                               for i, cell in enumerate(row)).rstrip())
    return csv_text, "\n".join(lines) + "\n"


def parse_report_csv(text: str) -> list:
    """Inverse of report_table's CSV output."""
    lines = [ln for ln in text.strip().splitlines() if ln]
    if not lines or lines[0] != ",".join(_COLUMNS):
        raise UsageError("unrecognized report header")
    out = []
    for ln in lines[1:]:
        fields = ln.split(",")
        if len(fields) != len(_COLUMNS):
            raise UsageError(f"bad report row: {ln!r}")
        model, g, l, a, seeds = fields
        out.append(ProbeReport(
            model_id=model,
            gmpc_cd=float(g) if g else None,
            lmpc_cd=float(l) if l else None,
            accuracy=float(a) if a else None,
            seeds=tuple(int(s) for s in seeds.split(";") if s),
        ))
    return out
