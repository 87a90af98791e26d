"""Compare dynamic accuracy with and without the half-trajectory occluder over many seeds.

Runs both decision modes: with the cross-scan cache a voxel's verdict is fixed
the first time it looks dynamic, without it every scan decides afresh.
"""
import argparse

from ghostsweep.evaluation import score
from ghostsweep.grid import make_grid_config
from ghostsweep.removal import remove_dynamic
from ghostsweep.synth import HALF_OCCLUDER, SceneSpec, synth_scene


def run(spec, seed, use_cache):
    scene = synth_scene(spec, seed=seed)
    static, _, _ = remove_dynamic(scene.map, scene.scans, make_grid_config(scene.map),
                                  use_cache=use_cache)
    return score(static.indices, scene.map)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=10)
    args = ap.parse_args()
    plain, occluded = SceneSpec(), SceneSpec(occluders=HALF_OCCLUDER)
    print(f"{'seed':>4} {'mode':<8} {'SA':>7} {'DA':>7} {'occ SA':>7} {'occ DA':>7} {'dDA':>7}")
    worst = {True: 0.0, False: 0.0}
    for seed in range(args.seeds):
        for use_cache in (True, False):
            a, b = run(plain, seed, use_cache), run(occluded, seed, use_cache)
            d = b.da - a.da
            worst[use_cache] = max(worst[use_cache], abs(d))
            print(f"{seed:>4} {'cache' if use_cache else 'no-cache':<8} {a.sa:7.2f} {a.da:7.2f} "
                  f"{b.sa:7.2f} {b.da:7.2f} {d:+7.2f}")
    print(f"largest |dDA|: cache {worst[True]:.2f}, no-cache {worst[False]:.2f}")


if __name__ == "__main__":
    main()
