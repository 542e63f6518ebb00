"""Train the small conv model on 8x8 digits, then prune and probe it.

Takes about a minute on one core.

    python3 demos/digits_compression_probe.py
"""

from lwta_icp import evaluation as E
from lwta_icp import trainer
from lwta_icp.config import TrainConfig
from lwta_icp.data import ingest


def main():
    data = ingest("digits8x8", seed=0)
    ckpt = trainer.train(TrainConfig(preset="cnn-mini", dataset="digits8x8", seed=0, epochs=30), data)
    base = trainer.accuracy(ckpt, data.x_test, data.t_test)
    print(f"test accuracy {base:.4f}")

    for threshold in (0.001, 0.01, 0.1, 0.5, 0.9):
        pruned, ratio = trainer.compress(ckpt, threshold)
        acc = trainer.accuracy(pruned, data.x_test, data.t_test)
        print(f"threshold {threshold:<6} removed {ratio:6.1%}  accuracy {acc:.4f}")

    for line in E.sparsity_report(ckpt, data.x_test).to_lines():
        if "active_fraction=" in line or "winner_entropy" in line:
            print(line)

    # which half of the representation carries the label?
    for line in E.probe_report(ckpt, data).to_lines():
        print(line)


if __name__ == "__main__":
    main()
