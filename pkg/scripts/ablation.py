"""Switch each module off in turn on the synthetic scene and tabulate the effect."""
import argparse

from ghostsweep.evaluation import score
from ghostsweep.grid import make_grid_config
from ghostsweep.removal import remove_dynamic
from ghostsweep.synth import HALF_OCCLUDER, SceneSpec, synth_scene

VARIANTS = [
    ("full", {}),
    ("no ground module", {"use_ground": False}),
    ("no restoration", {"use_restoration": False}),
    ("no cache", {"use_cache": False}),
    ("compare only", {"use_ground": False, "use_restoration": False}),
]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--occluded", action="store_true")
    args = ap.parse_args()
    scene = synth_scene(SceneSpec(occluders=HALF_OCCLUDER if args.occluded else ()),
                        seed=args.seed)
    config = make_grid_config(scene.map)
    print(f"{'variant':<18} {'SA':>7} {'DA':>7} {'HA':>7} {'ms/scan':>8}")
    for name, flags in VARIANTS:
        static, _, state = remove_dynamic(scene.map, scene.scans, config, **flags)
        r = score(static.indices, scene.map, [x.elapsed_ms / 1e3 for x in state.records])
        print(f"{name:<18} {r.sa:7.2f} {r.da:7.2f} {r.ha:7.2f} {r.runtime_mean * 1e3:8.1f}")


if __name__ == "__main__":
    main()
