"""Dump the feature maps of one conv LWTA layer as PGM images.

Inside each block only one map is non-zero at any pixel; the ReLU control
build of the same layer shows the overlap that competition removes.

    python3 demos/feature_maps.py [out_dir]
"""

import sys

from lwta_icp import evaluation as E
from lwta_icp import trainer
from lwta_icp.config import TrainConfig
from lwta_icp.data import ingest


def main(out_dir="feature_maps"):
    data = ingest("digits8x8", seed=0)
    ckpt = trainer.train(TrainConfig(preset="cnn-mini", dataset="digits8x8", seed=0, epochs=5), data)
    for layer in range(3):
        res = E.feature_map_export(ckpt, data.x_test[0], layer, f"{out_dir}/layer{layer}", relu_control=True)
        print(f"layer {layer}: {len(res.map_paths)} maps, overlapping pixels {res.overlap_count} "
              f"(relu control {res.control_overlap_count}); overlap image {res.overlap_path}")


if __name__ == "__main__":
    main(*sys.argv[1:])
