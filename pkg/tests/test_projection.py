import csv

import numpy as np
import pytest
from sklearn.cluster import KMeans

from histotriplet.errors import ContractError
from histotriplet.projection import (
    ProjectionConfig,
    project_2d,
    render_scatter,
    write_projection_metadata,
)
from histotriplet.synthetic import _purity, gaussian_cluster_embeddings


@pytest.fixture(scope="module")
def three_clusters():
    return gaussian_cluster_embeddings(
        n_per_class=120, n_classes=3, dim=128, separation=10.0, noise=1.0, seed=0
    )


class TestProject2d:
    def test_boundary_row_count_accepted(self, rng):
        coords = project_2d(
            rng.normal(size=(41, 8)), ProjectionConfig(n_neighbors=40, seed=0)
        )
        assert coords.shape == (41, 2)
        assert np.isfinite(coords).all()

    def test_too_few_rows_rejected(self, rng):
        with pytest.raises(ContractError):
            project_2d(rng.normal(size=(40, 8)), ProjectionConfig(n_neighbors=40))

    def test_bad_config_rejected(self):
        with pytest.raises(ContractError):
            ProjectionConfig(n_neighbors=1)
        with pytest.raises(ContractError):
            ProjectionConfig(output_dim=3)

    def test_cluster_purity_on_separated_gaussians(self, three_clusters):
        coords = project_2d(three_clusters, ProjectionConfig(n_neighbors=40, seed=0))
        km = KMeans(n_clusters=3, n_init=10, random_state=0).fit(coords)
        assert _purity(km.labels_.tolist(), three_clusters.labels) >= 0.95

    def test_deterministic_per_seed(self, three_clusters):
        cfg = ProjectionConfig(n_neighbors=40, seed=3)
        a = project_2d(three_clusters, cfg)
        b = project_2d(three_clusters, cfg)
        assert np.array_equal(a, b)


class TestRenderScatter:
    def test_writes_image_and_csv(self, tmp_path, rng):
        coords = rng.normal(size=(24, 2))
        labels = [f"class_{i % 8}" for i in range(24)]
        ids = [f"item/{i}" for i in range(24)]
        png, csv_path = render_scatter(coords, labels, ids, tmp_path / "fig.png")
        assert png.exists() and png.stat().st_size > 0
        with open(csv_path) as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["item_id", "x", "y", "label"]
        assert len(rows) == 25

    def test_csv_round_trips_at_6_significant_digits(self, tmp_path, rng):
        coords = rng.normal(size=(10, 2)).astype(np.float32)
        labels = ["a"] * 10
        ids = [str(i) for i in range(10)]
        _, csv_path = render_scatter(coords, labels, ids, tmp_path / "fig.png")
        with open(csv_path) as fh:
            rows = list(csv.reader(fh))[1:]
        back = np.array([[float(r[1]), float(r[2])] for r in rows])
        np.testing.assert_allclose(back, coords, rtol=1e-5)

    def test_empty_input_errors_without_writing(self, tmp_path):
        with pytest.raises(ContractError):
            render_scatter(np.zeros((0, 2)), [], [], tmp_path / "fig.png")
        assert not (tmp_path / "fig.png").exists()

    def test_metadata_records_config(self, tmp_path):
        cfg = ProjectionConfig(n_neighbors=40, seed=9)
        path = write_projection_metadata(tmp_path / "meta.json", cfg, {"rows": 3})
        import json

        meta = json.loads(path.read_text())
        assert meta["n_neighbors"] == 40
        assert meta["seed"] == 9
        assert meta["min_dist"] == 0.1
        assert meta["rows"] == 3
