"""Speaker-similarity scoring and transcript error rates."""

from __future__ import annotations

import json
import math
import shlex
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .audio import Waveform, compute_mel, load_waveform, save_waveform
from .exceptions import SEFVCError
from .tensorfile import read_tensor, write_tensor

SWEEP_LENGTHS_S = (2.0, 3.0, 5.0, 10.0)


class EmbedderError(SEFVCError):
    code = "embedder"


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"embedding sizes differ: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cannot take the cosine of a zero vector")
    return float(np.dot(a, b) / (na * nb))


def mean_secs(scores: Sequence[float | None]) -> float:
    ok = [s for s in scores if s is not None and math.isfinite(s)]
    if not ok:
        return float("nan")
    return math.fsum(ok) / len(ok)


def toy_embedding(w: Waveform) -> np.ndarray:
    """Per-bin mean and standard deviation of the 10 ms log-mel, each with
    its across-bin average removed."""
    mel = compute_mel(w, 10).values.astype(np.float64)
    mean = mel.mean(axis=0)
    std = mel.std(axis=0)
    return np.concatenate([mean - mean.mean(), std - std.mean()])


# ---------------------------------------------------------------------------
# external embedders


def run_embedder(command: str, wav_path, timeout: float = 300.0) -> np.ndarray:
    """Run ``command <wav> <out.tensor>`` and read the embedding it writes."""
    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp) / "embedding.tensor"
        argv = shlex.split(command) + [str(wav_path), str(out)]
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise EmbedderError(f"embedder failed to run: {exc}") from exc
        if proc.returncode != 0:
            tail = (proc.stderr or proc.stdout).strip().splitlines()[-1:] or [""]
            raise EmbedderError(f"embedder exited {proc.returncode}: {tail[0]}")
        if not out.is_file():
            raise EmbedderError("embedder wrote no output")
        return read_tensor(out).values.reshape(-1)


@dataclass
class PairResult:
    converted: str
    reference: str
    secs: float | None
    error: str | None = None
    ref_len_s: float | None = None


def score_pairs(pairs: Sequence[tuple[str, str]], embed: Callable[[str], np.ndarray], jobs: int = 4) -> list[PairResult]:
    """SECS for every ``(converted, reference)`` pair.

    Each distinct path is embedded once, with at most ``jobs`` embedder calls
    in flight. A failing pair is kept with its error and ``secs=None``.
    """
    paths = sorted({p for pair in pairs for p in pair})
    cache: dict[str, np.ndarray | Exception] = {}

    def work(p):
        try:
            return p, embed(p)
        except Exception as exc:  # recorded per pair
            return p, exc

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        for p, result in pool.map(work, paths):
            cache[p] = result
    results = []
    for conv, ref in pairs:
        a, b = cache[conv], cache[ref]
        err = next((str(x) for x in (a, b) if isinstance(x, Exception)), None)
        if err is None:
            try:
                results.append(PairResult(conv, ref, cosine_similarity(a, b)))
            except ValueError as exc:
                results.append(PairResult(conv, ref, None, str(exc)))
        else:
            results.append(PairResult(conv, ref, None, err))
    return results


def write_report(path, results: Sequence[PairResult], extra: dict | None = None) -> dict:
    summary = {
        "type": "summary",
        "mean_secs": mean_secs([r.secs for r in results]),
        "n_pairs": len(results),
        "n_failed": sum(r.secs is None for r in results),
        **(extra or {}),
    }
    lengths = sorted({r.ref_len_s for r in results if r.ref_len_s is not None})
    if lengths:
        summary["by_ref_len_s"] = {str(L): mean_secs([r.secs for r in results if r.ref_len_s == L]) for L in lengths}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for r in results:
            fh.write(json.dumps({"type": "pair", **asdict(r)}) + "\n")
        fh.write(json.dumps(summary) + "\n")
    return summary


def read_pairs(manifest) -> list[dict]:
    records = []
    with open(manifest) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise SEFVCError(f"{manifest}:{lineno}: {exc}") from exc
    return records


# ---------------------------------------------------------------------------
# character error rate


def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def cer(reference: str, hypothesis: str) -> float:
    """Character error rate of one transcript pair (transcription not included)."""
    if not reference:
        raise ValueError("reference transcript is empty")
    return edit_distance(reference, hypothesis) / len(reference)


def toy_embedder_main(argv: Sequence[str] | None = None) -> int:
    """``python -m sefvc.evaluation IN.wav OUT.tensor`` writes the toy embedding."""
    import sys

    args = list(sys.argv[1:] if argv is None else argv)
    if len(args) != 2:
        print("usage: python -m sefvc.evaluation IN.wav OUT.tensor", file=sys.stderr)
        return 2
    emb = toy_embedding(load_waveform(args[0]))
    write_tensor(args[1], emb, {"embedder": "toy-mel-stats"})
    return 0


if __name__ == "__main__":
    raise SystemExit(toy_embedder_main())
