import pytest

from kecae.cli import CONFIG_KEYS, build_parser, load_run_config, main


@pytest.fixture(scope="module")
def micro_dataset(tmp_path_factory):
    """gen-data -> split -> pairs at micro scale, via the CLI itself.

    Images stay at the desk preset's 64-pixel side so the train subcommand
    can run on them directly.
    """
    root = tmp_path_factory.mktemp("cli")
    pool = root / "pool"
    data = root / "data"
    pairs = root / "pairs.csv"
    assert main(["gen-data", "--out", str(pool), "--n", "14", "--seed", "3"]) == 0
    assert main(["split", "--pool", str(pool), "--out", str(data), "--seed", "3"]) == 0
    assert main(["pairs", "--data", str(data), "--n", "10", "--seed", "1", "--out", str(pairs)]) == 0
    return root, data, pairs


def write_micro_config(path):
    path.write_text(
        "epochs = 1\n"
        "batch_size = 3\n"
        "pair_sample_n = 10\n"
        "# comment line\n"
        "seeds = 0\n"
    )
    return path


class TestConfig:
    def test_defaults_complete(self):
        cfg = load_run_config(None)
        assert set(cfg) == set(CONFIG_KEYS)

    def test_unknown_key_rejected(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("nonsense_key = 1\n")
        assert main(["pairs", "--config", str(bad), "--data", "x", "--out", "y"]) == 1

    def test_malformed_line_rejected(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("epochs\n")
        assert main(["pairs", "--config", str(bad), "--data", "x", "--out", "y"]) == 1


class TestHelp:
    def test_every_subcommand_lists_defaults(self, capsys):
        parser = build_parser()
        for cmd in (
            "gen-data", "split", "pairs", "train", "generate",
            "probe", "grid", "sizes", "augeval", "gradcheck",
        ):
            with pytest.raises(SystemExit) as exc:
                parser.parse_args([cmd, "--help"])
            assert exc.value.code == 0
            text = capsys.readouterr().out
            assert "--help" in text
            # defaulted flags must show their default values in the help text
            if cmd == "pairs":
                assert "default: pairs.csv" in text

    def test_unknown_flag_exits_one(self, capsys):
        assert main(["pairs", "--bogus"]) == 1
        assert "error" in capsys.readouterr().err


class TestExitCodes:
    def test_missing_data_dir_is_data_error(self, tmp_path):
        assert main(["pairs", "--data", str(tmp_path / "nope"), "--out", "p.csv"]) == 2

    def test_oversized_pair_sample_is_data_error(self, micro_dataset, tmp_path):
        _, data, _ = micro_dataset
        code = main(
            ["pairs", "--data", str(data), "--n", "10000000", "--out", str(tmp_path / "p.csv")]
        )
        assert code == 2

    def test_gradcheck_passes(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert "conv2d/input" in out
        assert "max-rel-err" in out


class TestPairsCommand:
    def test_unique_rows(self, micro_dataset):
        _, _, pairs_csv = micro_dataset
        rows = pairs_csv.read_text().strip().splitlines()[1:]
        assert len(rows) == 10
        assert len(set(rows)) == 10

    def test_same_seed_same_file(self, micro_dataset, tmp_path):
        _, data, pairs_csv = micro_dataset
        again = tmp_path / "again.csv"
        assert main(["pairs", "--data", str(data), "--n", "10", "--seed", "1", "--out", str(again)]) == 0
        assert again.read_text() == pairs_csv.read_text()


class TestTrainCommand:
    def test_train_twice_identical_metrics(self, micro_dataset, tmp_path):
        root, data, pairs_csv = micro_dataset
        cfg = write_micro_config(tmp_path / "micro.cfg")
        args = [
            "train", "--config", str(cfg), "--data", str(data),
            "--pairs", str(pairs_csv), "--seed", "7",
        ]
        assert main(args + ["--out", str(tmp_path / "r1")]) == 0
        assert main(args + ["--out", str(tmp_path / "r2")]) == 0
        m1 = (tmp_path / "r1" / "metrics.csv").read_bytes()
        m2 = (tmp_path / "r2" / "metrics.csv").read_bytes()
        assert m1 == m2
        assert (tmp_path / "r1" / "config.txt").exists()
        assert (tmp_path / "r1" / "checkpoint" / "weights.bin").exists()

    def test_generate_and_probe_from_checkpoint(self, micro_dataset, tmp_path):
        root, data, pairs_csv = micro_dataset
        cfg = write_micro_config(tmp_path / "micro.cfg")
        run = tmp_path / "run"
        assert main([
            "train", "--config", str(cfg), "--data", str(data),
            "--pairs", str(pairs_csv), "--seed", "9", "--out", str(run),
        ]) == 0
        ckpt = run / "checkpoint"

        gen_dir = tmp_path / "gen"
        assert main([
            "generate", "--checkpoint", str(ckpt), "--data", str(data),
            "--pairs", str(pairs_csv), "--n", "3", "--out", str(gen_dir),
        ]) == 0
        labels = (gen_dir / "labels.csv").read_text().strip().splitlines()
        assert len(labels) == 1 + 12  # header + 4 outputs x 3 pairs

        probe_dir = tmp_path / "probe"
        assert main([
            "probe", "--checkpoint", str(ckpt), "--data", str(data),
            "--out", str(probe_dir),
        ]) == 0
        probe_rows = (probe_dir / "probe.csv").read_text().strip().splitlines()
        assert probe_rows[0] == "latent,acc"
        assert len(probe_rows) == 3
