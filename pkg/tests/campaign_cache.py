"""Run the acceptance campaign once per (config, source tree) and cache it.

Results are deterministic for a given config and code, so a cached report is
keyed by the hash of both. Set ROUNDREFINE_WORKERS to train in parallel.
"""

import hashlib
import json
import os
import time
from pathlib import Path

import roundrefine
from roundrefine.evalx import Campaign, campaign_to_dict, run_campaign

CACHE_DIR = Path(__file__).resolve().parent.parent / ".campaign_cache"


def source_hash() -> str:
    root = Path(roundrefine.__file__).parent
    h = hashlib.sha256()
    for p in sorted(root.rglob("*.py")):
        h.update(str(p.relative_to(root)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def campaign_key(c: Campaign) -> str:
    blob = json.dumps(campaign_to_dict(c), sort_keys=True) + source_hash()
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_or_run(c: Campaign = Campaign()) -> dict:
    path = CACHE_DIR / f"campaign_{campaign_key(c)}.json"
    if path.is_file():
        return json.loads(path.read_text())
    workers = int(os.environ.get("ROUNDREFINE_WORKERS", "1"))
    t0 = time.perf_counter()
    rep = run_campaign(c, workers=workers)
    rep["wall_seconds"] = time.perf_counter() - t0
    CACHE_DIR.mkdir(exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(rep, indent=1, sort_keys=True))
    tmp.replace(path)
    return rep


if __name__ == "__main__":
    r = load_or_run()
    print(f"campaign done in {r['wall_seconds']:.0f}s")
