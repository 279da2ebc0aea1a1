"""Render a little gallery of edits from the cached desk benchmark: recolor
(RGB->BGR), delete, extract, a translation, and a cross-style recompose
check. Builds (or reuses) the fixture, writes PNGs to --out."""

import argparse
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from desk_fixture import build_fixture  # noqa: E402
from featfield.datastore import write_png  # noqa: E402
from featfield.editor import ColorMap, RigidTransform, delete_edit, \
    extract_edit, recolor_edit, render_edit, transform_edit  # noqa: E402
from featfield.query import Selection  # noqa: E402
from featfield.renderer import render_view  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="/tmp/featfield_edits")
    ap.add_argument("--label", default="red_ball")
    ap.add_argument("--tau", type=float, default=0.8)
    args = ap.parse_args()

    fixture = build_fixture()
    scene, ds = fixture["scene"], fixture["dataset"]
    cam = ds.cameras[ds.split["holdout"][0]]
    sel = Selection(mode="threshold",
                    positives=ds.table.vector(args.label), tau=args.tau)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    kw = dict(channels=("rgb",), n_coarse=64, n_fine=96, seed=3)

    write_png(out / "0_original.png",
              render_view(scene, cam, mode="fine", **kw).rgb)
    gallery = {
        "1_recolor_bgr": recolor_edit(scene, sel, ColorMap(kind="bgr")),
        "2_delete": delete_edit(scene, sel),
        "3_extract": extract_edit(scene, sel),
        "4_lifted": transform_edit(
            scene, sel, RigidTransform.translate((0.0, 1.1, 0.0))),
        "5_enlarged": transform_edit(
            scene, sel, RigidTransform(scale=1.5)),
    }
    for name, edited in gallery.items():
        buf = render_edit(edited, cam, **kw)
        write_png(out / f"{name}.png", buf.rgb)
        print(f"wrote {out / f'{name}.png'}")

    deleted = render_edit(gallery["2_delete"], cam, **kw).rgb
    extracted = render_edit(gallery["3_extract"], cam, **kw).rgb
    plain = render_view(scene, cam, mode="fine", **kw).rgb
    err = float(np.abs(deleted + extracted - plain).mean())
    print(f"delete+extract recompose error: {err:.2e}")


if __name__ == "__main__":
    main()
