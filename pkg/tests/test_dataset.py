import numpy as np
import pytest

from vpflow.dataset import (
    DatasetError,
    load_cohort,
    read_covariates_csv,
    split_merged_positions,
    split_merged_topology,
    write_dataset,
)
from vpflow.mesh import TriangleTopology, merge_meshes
from vpflow.synthdata import SynthSpec, generate_population


@pytest.fixture(scope="module")
def records():
    return generate_population(SynthSpec(n_subjects=4, subdivisions=1, seed=0))


@pytest.fixture()
def cohort_dir(tmp_path, records):
    write_dataset(records, SynthSpec().covariates, tmp_path)
    return tmp_path


class TestWriteLoadRoundTrip:
    def test_files_exist(self, cohort_dir):
        assert (cohort_dir / "covariates.csv").exists()
        assert (cohort_dir / "ground_truth.csv").exists()
        assert (cohort_dir / "meshes" / "00000_endo.ply").exists()
        assert (cohort_dir / "meshes" / "00003_epi.ply").exists()

    def test_round_trip(self, cohort_dir, records):
        cohort = load_cohort(cohort_dir)
        assert len(cohort) == 4
        assert cohort.ids == [r.subject_id for r in records]
        assert cohort.schema == list(SynthSpec().covariates)
        assert np.allclose(
            cohort.covariates, np.stack([r.covariates for r in records])
        )
        for rec, endo, epi in zip(records, cohort.endo, cohort.epi):
            assert np.abs(endo.positions - rec.endo.positions).max() < 1e-5
            assert np.abs(epi.positions - rec.epi.positions).max() < 1e-5

    def test_merged_positions_layout(self, cohort_dir):
        cohort = load_cohort(cohort_dir)
        merged = cohort.merged_positions()
        n_endo = cohort.n_endo_vertices()
        assert merged.shape[0] == 4
        assert merged.shape[1] == n_endo + cohort.epi[0].topology.n_vertices
        endo, epi = split_merged_positions(merged, n_endo)
        assert np.array_equal(endo[0], cohort.endo[0].positions)
        assert np.array_equal(epi[0], cohort.epi[0].positions)

    def test_merged_topology_split(self, cohort_dir):
        cohort = load_cohort(cohort_dir)
        merged = cohort.merged_topology()
        endo, epi = split_merged_topology(merged, cohort.n_endo_vertices())
        assert np.array_equal(endo.faces, cohort.endo[0].topology.faces)
        assert np.array_equal(epi.faces, cohort.epi[0].topology.faces)


class TestSplitMergedTopology:
    def test_crossing_face_rejected(self):
        topo = TriangleTopology(6, np.array([[0, 1, 2], [2, 3, 4]]))
        with pytest.raises(DatasetError, match="crossing"):
            split_merged_topology(topo, 3)

    def test_merge_then_split_identity(self, records):
        endo, epi = records[0].endo, records[0].epi
        merged = merge_meshes(endo, epi)
        a, b = split_merged_topology(merged.topology, endo.topology.n_vertices)
        assert np.array_equal(a.faces, endo.topology.faces)
        assert np.array_equal(b.faces, epi.topology.faces)


class TestCovariatesCsv:
    def test_missing_id_column(self, tmp_path):
        path = tmp_path / "covariates.csv"
        path.write_text("age,weight\n50,80\n")
        with pytest.raises(DatasetError, match="'id'"):
            read_covariates_csv(path)

    def test_row_length_mismatch(self, tmp_path):
        path = tmp_path / "covariates.csv"
        path.write_text("id,age,weight\ns1,50\n")
        with pytest.raises(DatasetError, match="mismatch"):
            read_covariates_csv(path)

    def test_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "covariates.csv"
        path.write_text("id,age\ns1,50\n\ns2,60\n")
        ids, schema, values = read_covariates_csv(path)
        assert ids == ["s1", "s2"]
        assert schema == ["age"]
        assert values.tolist() == [[50.0], [60.0]]


class TestLoadCohortErrors:
    def test_missing_covariates_file(self, tmp_path):
        with pytest.raises(DatasetError, match="covariates.csv"):
            load_cohort(tmp_path)

    def test_missing_mesh_file(self, cohort_dir):
        (cohort_dir / "meshes" / "00002_epi.ply").unlink()
        with pytest.raises(DatasetError, match="00002"):
            load_cohort(cohort_dir)
