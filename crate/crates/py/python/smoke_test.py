"""Smoke test for the compiled `fscs` extension.

Build and run from the workspace root:

    cargo build --release -p fscs-py --features extension-module
    cp target/release/libfscs.so crates/py/python/fscs.so
    python3 crates/py/python/smoke_test.py
"""

import json
import pathlib
import sys

HERE = pathlib.Path(__file__).resolve().parent
sys.path.insert(0, str(HERE))

import fscs  # noqa: E402

FIXTURE = HERE.parent.parent / "core" / "fixtures" / "mini"


def main() -> None:
    ds = fscs.Dataset(str(FIXTURE))
    assert len(ds.classes()) == 8 and len(ds) == 48
    assert len(ds.fingerprint) == 16

    episodes = ds.sample(n_way=1, k_shot=1, fold=0, seed=1, count=6)
    assert len({e.episode_id for e in episodes}) == 6
    prompts = dict(episodes[0].visual_prompts())
    assert "query" in prompts and all(png.startswith(b"\x89PNG") for png in prompts.values())

    perfect = fscs.run_oracle(episodes)
    assert all(r.exact_match and not r.failed for r in perfect)
    assert all(v == 1.0 for r in perfect for v in r.per_class_iou.values())
    assert json.loads(perfect[0].transcript_jsonl.splitlines()[0])["type"] == "header"

    noisy = fscs.run_oracle(
        episodes,
        ["oracle.noise.box_scale_sigma=0.8", "agent.max_refinements_per_class=0"],
    )
    table = fscs.report(episodes, noisy)
    assert "segmentation mIoU (%)" in table
    report = json.loads(fscs.report(episodes, perfect, format="json"))
    assert report["average"]["exact_ratio_pct"] == 100.0

    mask = fscs.Mask(3, 2, [True, False, True, False, True, True])
    back = fscs.Mask.from_rle(mask.to_rle())
    assert back.bits() == mask.bits() and back.count() == 4
    assert fscs.iou(mask, back) == 1.0
    empty = fscs.Mask(3, 2, [False] * 6)
    assert fscs.iou(mask, empty) == 0.0

    try:
        fscs.run_oracle(episodes, ["agent.no_such_key=1"])
    except ValueError:
        pass
    else:
        raise AssertionError("unknown override accepted")

    print(table)
    print("smoke test passed")


if __name__ == "__main__":
    main()
