"""Train the small dense model on the two-blob preset and watch the loss terms.

    python3 demos/blobs_training.py
"""

from lwta_icp import trainer
from lwta_icp.config import TrainConfig
from lwta_icp.data import ingest


def main():
    data = ingest("blobs", seed=0)
    config = TrainConfig(preset="mlp-tiny", dataset="blobs", seed=0, epochs=20)

    def log(metrics):
        if metrics["epoch"] % 5 == 0:
            print(f"epoch {metrics['epoch']:3d}  total={metrics['total']:.4f}  ce_r={metrics['ce_r']:.4f}  "
                  f"kl={metrics['kl']:.5f}  acc={metrics['acc']:.3f}")

    ckpt = trainer.train(config, data, log=log)
    print("train accuracy", trainer.accuracy(ckpt, data.x_train, data.t_train))
    print("test accuracy ", trainer.accuracy(ckpt, data.x_test, data.t_test))
    # one posterior sample versus the 5-sample average on the same points
    print("1-sample probs", trainer.predict(ckpt, data.x_test[:3], 1).round(3).tolist())
    print("5-sample probs", trainer.predict(ckpt, data.x_test[:3], 5).round(3).tolist())


if __name__ == "__main__":
    main()
