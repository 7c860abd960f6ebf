"""Render the structure image and colour cue of one bundled texture.

    python3 demos/two_shot.py [texture-name] [out-dir]
"""
import sys
from importlib import resources
from pathlib import Path

from hybridtele import fileio, production_geometry
from hybridtele.design import autofocus_solve
from hybridtele.imaging import SceneSpec, SensorModel, ground_truth, render_pair

DEPTH = 0.673


def main(name="siemens_star", out="two_shot_out"):
    g = production_geometry()
    g = g.replace(s_sep=autofocus_solve(g, DEPTH))
    sensor = SensorModel.default()
    scene = SceneSpec.from_file(resources.files("hybridtele") / "data" / "textures" / f"{name}.png", DEPTH)
    pair = render_pair(scene, g, sensor, seed=0)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_pfm(out / "structure.pfm", pair.structure)
    fileio.write_pfm(out / "color.pfm", pair.color)
    fileio.write_pfm(out / "gt.pfm", ground_truth(scene, g, sensor))
    print(f"wrote {sorted(p.name for p in out.iterdir())} to {out}")


if __name__ == "__main__":
    main(*sys.argv[1:3])
