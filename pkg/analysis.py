import logging
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd
import torch
from fire import Fire
from sklearn.decomposition import PCA
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import silhouette_score
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from torch import Tensor

from errors import ArgumentError
from sn_core import SNPattern, SignatureRecord, stamp_images

logger = logging.getLogger(__name__)


@torch.no_grad()
def extract_features(
    handles, images: Tensor, pattern: Optional[SNPattern] = None, batch_size: int = 1000
) -> np.ndarray:
    """Flattened G_e outputs, stamped first when a pattern is given."""
    was_training = handles.training
    handles.eval()
    outputs = []
    for start in range(0, len(images), batch_size):
        x = images[start : start + batch_size]
        if pattern is not None:
            x = stamp_images(x, pattern)
        e = handles.features(x.to(handles.device))
        outputs.append(e.flatten(start_dim=1).cpu().numpy())
    handles.train(was_training)
    return np.concatenate(outputs) if outputs else np.zeros((0, handles.spec.feature_dim()))


def sample_indices(n_total: int, n: int, seed: int) -> np.ndarray:
    if not 1 <= n <= n_total:
        raise ArgumentError(f"n must lie in [1, {n_total}], got {n}")
    return np.random.default_rng(seed).permutation(n_total)[:n]


def export_embeddings(
    bundle,
    dataset,
    pattern: Optional[SNPattern] = None,
    n: int = 1000,
    seed: int = 0,
    batch_size: int = 1000,
) -> pd.DataFrame:
    """Feature table of n seeded test images.

    Raw rows always, stamped rows as well when a pattern is given. Both variants
    of an image share its index. pc1/pc2 are principal components fitted on the
    exported matrix.
    """
    images, labels = dataset.split("test")
    indices = sample_indices(len(labels), n, seed)
    x = images[torch.as_tensor(indices)]
    y = labels[torch.as_tensor(indices)].numpy()

    variants = [(0, None)] + ([(1, pattern)] if pattern is not None else [])
    frames = []
    for stamped, p in variants:
        features = extract_features(bundle.handles, x, p, batch_size)
        frame = pd.DataFrame(features, columns=[f"e_{i}" for i in range(features.shape[1])])
        frame.insert(0, "stamped", stamped)
        frame.insert(0, "label", y)
        frame.insert(0, "index", indices)
        frames.append(frame)
    table = pd.concat(frames, ignore_index=True)

    matrix = table.filter(like="e_").to_numpy()
    n_components = min(2, *matrix.shape)
    projection = np.zeros((len(matrix), 2))
    if len(matrix) > 1:
        projection[:, :n_components] = PCA(
            n_components=n_components, random_state=seed
        ).fit_transform(matrix)
    table["pc1"] = projection[:, 0]
    table["pc2"] = projection[:, 1]
    logger.info(str(dict(export_rows=len(table), feature_dim=matrix.shape[1])))
    return table


def label_silhouette(points: np.ndarray, labels: np.ndarray) -> float:
    n_labels = len(set(labels.tolist()))
    if not 2 <= n_labels <= len(points) - 1:
        return float("nan")
    return float(silhouette_score(points, labels))


def embedding_separability(table: pd.DataFrame) -> dict:
    """Silhouette of the label clusters in the (pc1, pc2) projection, raw vs stamped rows."""
    scores = {}
    for stamped, name in [(0, "silhouette_raw"), (1, "silhouette_stamped")]:
        rows = table[table["stamped"] == stamped]
        scores[name] = label_silhouette(rows[["pc1", "pc2"]].to_numpy(), rows["label"].to_numpy())
    return scores


def linear_probe(
    features_train: np.ndarray,
    y_train: np.ndarray,
    features_test: np.ndarray,
    y_test: np.ndarray,
    seed: int = 0,
) -> float:
    """Accuracy (percent) of a fresh logistic regression trained on frozen features."""
    clf = make_pipeline(
        StandardScaler(), LogisticRegression(max_iter=1000, random_state=seed)
    )
    clf.fit(features_train, y_train)
    return 100.0 * clf.score(features_test, y_test)


def probe_separability(
    bundle,
    dataset,
    pattern: SNPattern,
    n_train: int = 5000,
    n_test: int = 1000,
    seed: int = 0,
) -> dict:
    """Linear probes on frozen G_e features of raw and of stamped images."""
    train_x, train_y = dataset.split("train")
    test_x, test_y = dataset.split("test")
    i_train = torch.as_tensor(sample_indices(len(train_y), min(n_train, len(train_y)), seed))
    i_test = torch.as_tensor(sample_indices(len(test_y), min(n_test, len(test_y)), seed))

    scores = {}
    for name, p in [("probe_raw", None), ("probe_stamped", pattern)]:
        f_train = extract_features(bundle.handles, train_x[i_train], p)
        f_test = extract_features(bundle.handles, test_x[i_test], p)
        scores[name] = linear_probe(
            f_train, train_y[i_train].numpy(), f_test, test_y[i_test].numpy(), seed
        )
    logger.info(str(scores))
    return scores


def test_export(
    path_ckpt: str = "runs/mnist/checkpoints/student_packaged",
    path_cert: str = "runs/mnist/sn.json",
    data_dir: str = "data",
    n: int = 1000,
    path_out: str = "embeddings.csv",
):
    from data_process import load_dataset
    from training import StudentBundle

    bundle = StudentBundle.load(path_ckpt)
    pattern = SignatureRecord.load(path_cert).pattern()
    data = load_dataset(bundle.handles.spec.name, data_dir)
    table = export_embeddings(bundle, data, pattern, n)
    table.to_csv(path_out, index=False)
    print(embedding_separability(table))
    print(probe_separability(bundle, data, pattern))


def find_best(pattern: str = "runs/*/metrics/student.csv", column: str = "acc_with_sn"):
    for path in sorted(Path().glob(pattern)):
        frame = pd.read_csv(path)
        print(dict(path=str(path), best=frame[column].max(), last=frame.iloc[-1].to_dict()))


"""
p analysis.py test_export --path_ckpt runs/mnist/checkpoints/student_packaged
p analysis.py find_best
"""


if __name__ == "__main__":
    Fire()
