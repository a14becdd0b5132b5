"""
Test suite for the I/O codec and bundled fixtures

Tests cover:
- Bundled fixture JSON files matching their builders
- Fixture lookup and configured fixture directories
- Matrix encoding errors and malformed instrument files
- Atomic writes and CSV number formatting
- FCS JSON without explicit Kraus operators
"""

import json

import numpy as np
import pytest

from qhmm.config import Settings
from qhmm.utils import fixtures, io


class TestBundledFixtures:
    """Test the bundled fixture files."""

    @pytest.mark.parametrize("name", sorted(fixtures.BUILDERS))
    def test_json_matches_builder(self, settings, name):
        """Each bundled file describes the same instrument as its builder."""
        loaded = fixtures.load_fixture(name, settings)
        built = fixtures.BUILDERS[name]()
        assert loaded.dim == built.dim
        assert loaded.labels == built.labels
        assert np.array_equal(loaded.values, built.values)
        for mine, theirs in zip(loaded.outcomes, built.outcomes):
            assert np.allclose(mine.superoperator(built.dim).matrix, theirs.superoperator(built.dim).matrix, atol=1e-15)

    def test_every_configured_name_is_bundled(self, settings):
        """Default fixture names all have files."""
        for name in settings.fixture_names:
            assert fixtures.fixture_path(name, settings).exists()

    def test_unknown_name(self, settings):
        """Names outside the configured list are rejected."""
        with pytest.raises(fixtures.UnknownFixtureError):
            fixtures.load_fixture("no-such-fixture", settings)

    def test_fixture_dir_override(self, tmp_path):
        """A configured directory replaces the bundled one."""
        io.dump_instrument(fixtures.iid_coin(0.25), tmp_path / "biased.json")
        settings = Settings(fixture_dir=str(tmp_path), fixture_names="biased")
        loaded = fixtures.load_fixture("biased", settings)
        assert abs(loaded.outcomes[0].kraus[0][0, 0]) ** 2 == pytest.approx(0.25)

    def test_configured_name_without_file(self, tmp_path):
        """A configured name with no file is reported, not crashed on."""
        settings = Settings(fixture_dir=str(tmp_path), fixture_names="missing")
        with pytest.raises(fixtures.UnknownFixtureError, match="does not exist"):
            fixtures.load_fixture("missing", settings)


class TestInstrumentJson:
    """Test instrument JSON decoding errors."""

    def test_missing_keys(self):
        """dim and outcomes are required."""
        with pytest.raises(io.InstrumentFormatError):
            io.instrument_from_dict({"dim": 1})

    def test_missing_outcome_fields(self):
        """Each outcome needs label, value and kraus."""
        with pytest.raises(io.InstrumentFormatError, match="Outcome 0"):
            io.instrument_from_dict({"dim": 1, "outcomes": [{"label": "a"}]})

    def test_bad_matrix(self):
        """Kraus entries must be [re, im] pairs."""
        with pytest.raises(io.InstrumentFormatError, match="pairs"):
            io.decode_matrix([[1.0, 0.0]])

    def test_invalid_json(self, tmp_path):
        """Unparseable files raise the format error."""
        path = tmp_path / "broken.json"
        path.write_text("{not json", encoding="utf-8")
        with pytest.raises(io.InstrumentFormatError):
            io.load_instrument(path)

    def test_complex_entries_survive(self, tmp_path, qubit):
        """The phase gate's imaginary entry is kept."""
        path = tmp_path / "qubit.json"
        io.dump_instrument(qubit, path)
        loaded = io.load_instrument(path)
        assert loaded.outcomes[1].kraus[0][1, 1] == pytest.approx(np.sqrt(0.3) * 1j)

    def test_initial_state_written(self, tmp_path):
        """An explicit initial state is part of the file."""
        shift = fixtures.cyclic_shift(3, initial_state=np.diag([1.0, 0.0, 0.0]))
        path = tmp_path / "shift.json"
        io.dump_instrument(shift, path)
        assert "initial_state" in json.loads(path.read_text(encoding="utf-8"))
        assert np.allclose(io.load_instrument(path).initial_state, np.diag([1.0, 0.0, 0.0]))


class TestWriters:
    """Test output writers."""

    def test_atomic_write_leaves_nothing_on_failure(self, tmp_path):
        """A failing writer neither creates the target nor leaves a temporary file."""
        target = tmp_path / "out.csv"
        with pytest.raises(RuntimeError):
            with io.atomic_write(target) as handle:
                handle.write("partial")
                raise RuntimeError("boom")
        assert list(tmp_path.iterdir()) == []

    def test_csv_formatting(self, tmp_path):
        """Floats use round-trip repr, None becomes empty, lines end in LF."""
        path = tmp_path / "table.csv"
        io.write_csv(path, ("n", "x", "y"), [(3, 0.1, None)])
        assert path.read_bytes() == b"n,x,y\n3,0.1,\n"

    def test_json_to_stdout(self, capsys):
        """No path writes to stdout."""
        io.write_json({"a": 1})
        assert json.loads(capsys.readouterr().out) == {"a": 1}

    def test_sum_distribution_rows(self, tmp_path, simulation_service, coin):
        """Rows are sorted by the sum."""
        path = tmp_path / "sums.csv"
        io.write_sum_distribution(path, simulation_service.exact_sum_distribution(coin, coin.state(), 2))
        lines = path.read_text(encoding="utf-8").splitlines()
        assert lines[0] == "sum,probability"
        rows = [tuple(float(x) for x in line.split(",")) for line in lines[1:]]
        assert [s for s, _ in rows] == [0.0, 1.0, 2.0]
        assert [p for _, p in rows] == pytest.approx([0.25, 0.5, 0.25])


class TestFcsJson:
    """Test FCS JSON encoding."""

    def test_kraus_recovered_when_absent(self, tmp_path, instrument_service, chain):
        """A matrix-only Gamma is written through its Choi decomposition."""
        model = instrument_service.to_fcs(chain)
        stripped = model.model_copy(update={"gamma": model.gamma.model_copy(update={"kraus": None})})
        path = tmp_path / "fcs.json"
        io.dump_fcs(stripped, path)
        loaded = io.load_fcs(path)
        assert np.allclose(loaded.gamma.matrix, model.gamma.matrix, atol=1e-10)
        assert np.allclose(loaded.observable.matrix, model.observable.matrix)

    def test_missing_keys(self):
        """All FCS fields are required."""
        with pytest.raises(io.InstrumentFormatError):
            io.fcs_from_dict({"hidden_dim": 2})
