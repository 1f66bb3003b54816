import math
import textwrap

import pytest

from hplab.cli import ConfigError, dump_config, main, parse_config
from hplab.experiments import CSV_HEADER

SMALL = """
[geometry]
a = 0.5
R_scat = 0.75
R_pml_minus = 1.0
R_pml_plus = 1.6
R_tr = 1.3
"""


def write(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(textwrap.dedent(text), encoding="utf-8")
    return path


def test_minimal_config_gets_defaults_and_round_trips():
    cfg = parse_config("")
    assert cfg["pml"]["theta"] == pytest.approx(math.pi / 4)
    assert cfg["problem"]["truncation"] == "pml"
    text = dump_config(cfg)
    assert dump_config(parse_config(text)) == text
    commented = "# a comment\n" + text.replace("[pml]", "[pml]   # trailing comment")
    assert dump_config(parse_config(commented)) == text


def test_dump_subcommand_round_trips(tmp_path, capsys):
    path = write(tmp_path, SMALL + "[pml]\ntheta = pi/6\n[study]\nk = 5, 10\np = 1\n")
    assert main(["dump", "--config", str(path)]) == 0
    first = capsys.readouterr().out
    again = write(tmp_path, first, "again.cfg")
    assert main(["dump", "--config", str(again)]) == 0
    assert capsys.readouterr().out == first
    assert "theta = 0.5235987755982988" in first


def test_angle_out_of_range_names_profile_invariant(tmp_path, capsys):
    path = write(tmp_path, "[pml]\ntheta = 2.0\n")
    assert main(["solve", "--config", str(path)]) == 2
    err = capsys.readouterr().err
    assert "PmlProfile" in err and "theta" in err


def test_duplicate_key_cites_both_lines():
    text = "[study]\nk = 5\n\n# again\nk = 10\n"
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    msg = str(info.value)
    assert "line 5" in msg and "line 2" in msg and "'k'" in msg


@pytest.mark.parametrize("text,fragment", [
    ("[geometry]\nradius = 1\n", "unknown key 'radius'"),
    ("[mesh]\n", "unknown section [mesh]"),
    ("k = 5\n", "outside of any [section]"),
    ("[problem]\nk 5\n", "line 2, column 1: expected 'key = value'"),
    ("[problem]\nk = fast\n", "line 2, column 5: invalid value 'fast'"),
    ("[problem\n", "unterminated section header"),
    ("[geometry]\nR_scat = 0.1\n", "GeometrySpec invariant"),
    ("[study]\nsolver = magic\n", "StudyConfig invariant"),
    ("[problem]\nk = -1\n", "ProblemSpec invariant"),
    ("[pml]\nr_minus = 1.2\n[geometry]\nR_pml_minus = 1.5\n", "contradicts"),
])
def test_invalid_configs_rejected(text, fragment):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert fragment in str(info.value)


def test_layer_radii_in_pml_section_set_geometry():
    cfg = parse_config(SMALL.replace("R_pml_minus = 1.0\n", "").replace("R_pml_plus = 1.6\n", "")
                       + "[pml]\nr_minus = 1.0\nr_plus = 1.6\n")
    assert cfg.geometry.R_pml_minus == 1.0 and cfg.geometry.R_pml_plus == 1.6


def test_missing_config_file_reports_path(tmp_path, capsys):
    missing = tmp_path / "nowhere" / "absent.cfg"
    assert main(["pollution", "--config", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_unknown_subcommand_is_invalid(tmp_path):
    assert main(["frobnicate", "--config", "x.cfg"]) == 2
    assert main(["pollution", "--config", str(write(tmp_path, "")), "--jobs", "0"]) == 2


def test_pollution_writes_csv_with_exact_header(tmp_path, capsys):
    path = write(tmp_path, SMALL + "[study]\nk = 3, 6\np = 1\nc = 1.0\n")
    out = tmp_path / "p.csv"
    assert main(["pollution", "--config", str(path), "--out", str(out), "--jobs", "1"]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == CSV_HEADER
    assert len(lines) == 3
    assert "pollution 1:" in capsys.readouterr().out


def test_solve_prints_norms_and_writes_field(tmp_path, capsys):
    path = write(tmp_path, SMALL + "[problem]\nk = 4\np = 2\nh = 0.2\n")
    vtk = tmp_path / "u.vtk"
    assert main(["solve", "--config", str(path), "--field", str(vtk)]) == 0
    out = capsys.readouterr().out
    assert "reference = mie" in out and "rel_H1k" in out
    text = vtk.read_text()
    assert "UNSTRUCTURED_GRID" in text and "u_abs" in text


def test_numerical_failure_exit_code(tmp_path, capsys):
    # a mesh far too coarse for the bands fails inside the cell
    path = write(tmp_path, SMALL + "[study]\nk = 3\np = 1\nc = 10\n")
    assert main(["pollution", "--config", str(path), "--out", str(tmp_path / "x.csv")]) == 3
    assert "k=3.0" in capsys.readouterr().err


def test_seed_gives_identical_constants(tmp_path):
    path = write(tmp_path, SMALL + "[study]\nk = 3\np = 1\nh_rule = list\nh = 0.15\n")
    rows = []
    for i in range(2):
        out = tmp_path / f"v{i}.csv"
        assert main(["verify-abstract", "--config", str(path), "--out", str(out), "--seed", "7"]) == 0
        rows.append([line.rsplit(",", 1)[0] for line in out.read_text().splitlines()])
    assert rows[0] == rows[1]
