# pylint: disable=missing-module-docstring,missing-class-docstring,missing-function-docstring

import json
import os
from pathlib import Path
import shutil
from tempfile import TemporaryDirectory
from unittest import TestCase, skipUnless

from specklepad.__main__ import main
from specklepad.architectures import ArchKind
from specklepad.data import Label, Manifest, Species
from specklepad.error import ConfigurationError, DataError
from specklepad.experiment import (
    EFFECTIVE_CONFIG_FILE,
    EVAL_FILE,
    LEDGER_FILE,
    RUN_FILE,
    SUMMARY_FILE,
    ExperimentConfig,
    Job,
    evaluate_run,
    format_summary,
    group_by_region,
    plan_jobs,
    prepare_run,
    read_ledger,
    repair_ledger,
    report_run,
    run_experiment,
    summarize,
)
from specklepad.partition import Strategy
from specklepad.synth import default_counts, make_synth_dataset

SLOW = os.environ.get("SPECKLEPAD_SLOW") == "1"

TINY_COUNTS = {
    (Label.BonaFide, None): 9,
    (Label.Attack, Species.Transparency): 3,
    (Label.Attack, Species.DragonSkin): 3,
}


def write_config(directory: Path, **settings) -> Path:
    raw = {
        "manifest": "data/manifest.json",
        "archs": ["BaseN"],
        "spatial": [8],
        "temporal": [5],
        "epochs": 1,
        "batch": 32,
        "output_root": str(directory / "runs"),
    }
    raw.update(settings)
    path = directory / "config.json"
    path.write_text(json.dumps(raw), encoding="utf-8")
    return path


def ledger_lines(run_dir: Path) -> list:
    return (run_dir / LEDGER_FILE).read_text(encoding="utf-8").splitlines()


class Configs(TestCase):
    def test_manifest_resolves_against_the_config(self) -> None:
        with TemporaryDirectory() as tmp:
            cfg = ExperimentConfig.from_json(write_config(Path(tmp)))
            self.assertEqual(Path(cfg.manifest), Path(tmp).resolve() / "data" / "manifest.json")
            self.assertEqual(cfg.archs, (ArchKind.BaseN,))
            self.assertIs(cfg.strategy, Strategy.ThreeFold)

    def test_defaults(self) -> None:
        cfg = ExperimentConfig.from_dict({"manifest": "/data/manifest.json"})
        self.assertEqual((cfg.archs, cfg.spatial, cfg.temporal), ((ArchKind.Lstm,), (8,), (100,)))
        self.assertEqual((cfg.lr, cfg.epochs, cfg.batch, cfg.folds), (2e-4, 50, 64, 3))

    def test_unknown_keys(self) -> None:
        with self.assertRaises(ConfigurationError):
            ExperimentConfig.from_dict({"manifest": "m.json", "learning_rate": 0.1})

    def test_invalid_values(self) -> None:
        for bad in ({"spatial": [12]}, {"archs": ["vgg"]}, {"epochs": 0}, {"strategy": "random"}, {"workers": 0}):
            with self.subTest(**bad):
                with self.assertRaises(ConfigurationError):
                    ExperimentConfig.from_dict({"manifest": "m.json", **bad})

    def test_not_json(self) -> None:
        with TemporaryDirectory() as tmp:
            path = Path(tmp) / "config.json"
            path.write_text("{", encoding="utf-8")
            with self.assertRaises(ConfigurationError):
                ExperimentConfig.from_json(path)

    def test_overrides(self) -> None:
        cfg = ExperimentConfig.from_dict({"manifest": "m.json", "epochs": 7})
        changed = cfg.with_overrides(seed=3, epochs=None, workers=2)
        self.assertEqual((changed.seed, changed.epochs, changed.workers), (3, 7, 2))

    def test_json_round_trip(self) -> None:
        cfg = ExperimentConfig.from_dict({"manifest": "/m.json", "archs": "resn", "strategy": "loao", "stride": 4})
        self.assertEqual(ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_json()))), cfg)


class Jobs(TestCase):
    def test_sweep_order_and_keys(self) -> None:
        cfg = ExperimentConfig.from_dict({"manifest": "m.json", "archs": ["BaseN", "Lstm"], "temporal": [5, 10]})
        jobs = plan_jobs(cfg, 3)
        self.assertEqual(len(jobs), 12)
        self.assertEqual(jobs[0].key, "BaseN-8x8x5-fold0")
        self.assertEqual(jobs[-1].key, "Lstm-8x8x10-fold2")
        self.assertEqual(jobs[-1].config_key, "Lstm-8x8x10")

    def test_seeds_depend_on_the_job_only(self) -> None:
        job = Job(ArchKind.ResN, 16, 10, 1)
        self.assertEqual(job.seeds(0), Job(ArchKind.ResN, 16, 10, 1).seeds(0))
        self.assertNotEqual(job.seeds(0), Job(ArchKind.ResN, 16, 10, 2).seeds(0))
        self.assertNotEqual(job.seeds(0), job.seeds(1))

    def test_jobs_sharing_clips_run_together(self) -> None:
        cfg = ExperimentConfig.from_dict({"manifest": "m.json", "archs": ["BaseN", "Lstm"], "spatial": [8, 64, 16]})
        groups = group_by_region(cfg, plan_jobs(cfg, 2))
        self.assertEqual([len(group) for group in groups], [8, 4])
        self.assertEqual({job.side for job in groups[0]}, {8, 16})
        self.assertEqual(groups[0][0].key, "BaseN-8x8x100-fold0")
        self.assertEqual({job.side for job in groups[1]}, {64})


class Ledger(TestCase):
    def test_torn_last_line_is_ignored(self) -> None:
        with TemporaryDirectory() as tmp:
            run_dir = Path(tmp)
            record = {"job": "a", "status": "ok", "seconds": 1.0, "error": None}
            (run_dir / LEDGER_FILE).write_text(json.dumps(record) + '\n{"job": "b", "sta', encoding="utf-8")
            self.assertEqual(list(read_ledger(run_dir)), ["a"])
            repair_ledger(run_dir)
            self.assertEqual(ledger_lines(run_dir), [json.dumps(record)])

    def test_complete_last_line_gets_its_newline(self) -> None:
        with TemporaryDirectory() as tmp:
            run_dir = Path(tmp)
            record = json.dumps({"job": "a", "status": "failed", "seconds": 1.0, "error": "DataError: x"})
            (run_dir / LEDGER_FILE).write_text(record, encoding="utf-8")
            repair_ledger(run_dir)
            self.assertEqual((run_dir / LEDGER_FILE).read_text(encoding="utf-8"), record + "\n")
            self.assertFalse(read_ledger(run_dir)["a"].ok)

    def test_corrupt_middle_line(self) -> None:
        with TemporaryDirectory() as tmp:
            run_dir = Path(tmp)
            record = json.dumps({"job": "a", "status": "ok", "seconds": 1.0})
            (run_dir / LEDGER_FILE).write_text(f"garbage\n{record}\n", encoding="utf-8")
            with self.assertRaises(DataError):
                read_ledger(run_dir)

    def test_latest_record_wins(self) -> None:
        with TemporaryDirectory() as tmp:
            run_dir = Path(tmp)
            lines = [
                json.dumps({"job": "a", "status": "failed", "seconds": 1.0, "error": "x"}),
                json.dumps({"job": "a", "status": "ok", "seconds": 2.0}),
            ]
            (run_dir / LEDGER_FILE).write_text("\n".join(lines) + "\n", encoding="utf-8")
            self.assertTrue(read_ledger(run_dir)["a"].ok)

    def test_no_ledger(self) -> None:
        with TemporaryDirectory() as tmp:
            self.assertEqual(read_ledger(Path(tmp)), {})


class Runs(TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        cls.tmp = TemporaryDirectory()
        root = Path(cls.tmp.name)
        make_synth_dataset(root / "data", TINY_COUNTS, subjects=6, seed=0, geometry=(32, 32, 5))
        config = write_config(root)
        cls.cfg = ExperimentConfig.from_json(config)
        cls.run_dir = prepare_run(cls.cfg, config.read_text(encoding="utf-8"))
        cls.record = run_experiment(cls.cfg, cls.run_dir)

    @classmethod
    def tearDownClass(cls) -> None:
        cls.tmp.cleanup()

    def test_every_fold_reports(self) -> None:
        self.assertEqual([job["status"] for job in self.record.jobs], ["ok"] * 3)
        self.assertEqual(list(self.record.aggregates), ["BaseN-8x8x5"])
        self.assertEqual(self.record.aggregates["BaseN-8x8x5"]["stats"]["acer"]["count"], 3)
        for fold in range(3):
            job_dir = self.run_dir / "jobs" / f"BaseN-8x8x5-fold{fold}"
            for name in ("weights.spw", "report.json", "scores.json", "history.json", "roc.csv"):
                self.assertTrue((job_dir / name).exists(), f"{job_dir.name}/{name}")

    def test_run_files(self) -> None:
        self.assertEqual(
            (self.run_dir / "config.json").read_text(encoding="utf-8"),
            (Path(self.tmp.name) / "config.json").read_text(encoding="utf-8"),
        )
        self.assertTrue((self.run_dir / EFFECTIVE_CONFIG_FILE).exists())
        run = json.loads((self.run_dir / RUN_FILE).read_text(encoding="utf-8"))
        self.assertEqual(len(run["jobs"]), 3)
        self.assertIn("version", run)

    def test_resume_skips_finished_jobs(self) -> None:
        before = ledger_lines(self.run_dir)
        with open(self.run_dir / LEDGER_FILE, "a", encoding="utf-8") as ledger:
            ledger.write('{"job": "BaseN-8x8x5-fo')
        record = run_experiment(self.cfg.with_overrides(workers=2), self.run_dir)
        self.assertEqual(ledger_lines(self.run_dir), before)
        self.assertEqual([job["status"] for job in record.jobs], ["ok"] * 3)

    def test_eval_matches_recorded_scores(self) -> None:
        results = evaluate_run(self.run_dir, workers=2)
        self.assertEqual(sorted(results), [f"BaseN-8x8x5-fold{fold}" for fold in range(3)])
        self.assertTrue(all(result["matches_recorded"] for result in results.values()))
        self.assertTrue((self.run_dir / EVAL_FILE).exists())

    def test_report(self) -> None:
        rows = summarize(self.run_dir)
        self.assertEqual(len(rows), 1)
        self.assertTrue(rows[0].best)
        self.assertEqual((rows[0].folds_done, rows[0].folds_total), (3, 3))
        table = report_run(self.run_dir)
        self.assertIn("* BaseN", table)
        self.assertTrue((self.run_dir / SUMMARY_FILE).exists())

    def test_missing_sweep_points_have_empty_cells(self) -> None:
        with TemporaryDirectory() as tmp:
            copy = Path(tmp) / "run"
            shutil.copytree(self.run_dir, copy)
            raw = json.loads((copy / EFFECTIVE_CONFIG_FILE).read_text(encoding="utf-8"))
            raw["temporal"] = [5, 3]
            (copy / EFFECTIVE_CONFIG_FILE).write_text(json.dumps(raw), encoding="utf-8")
            rows = summarize(copy)
        self.assertEqual([row.geometry for row in rows], ["8x8x5", "8x8x3"])
        self.assertEqual(rows[1].folds_done, 0)
        self.assertEqual(rows[1].stats["acer"], (None, None))
        self.assertFalse(rows[1].best)
        self.assertIn("0/3", format_summary(rows).splitlines()[2])


class Failures(TestCase):
    def setUp(self) -> None:
        self.tmp = TemporaryDirectory()
        self.root = Path(self.tmp.name)
        make_synth_dataset(self.root / "data", TINY_COUNTS, subjects=6, seed=1, geometry=(32, 32, 5))

    def tearDown(self) -> None:
        self.tmp.cleanup()

    def test_failed_jobs_are_recorded(self) -> None:
        # clips have 5 frames, so 6-frame patches cannot be cut
        cfg = ExperimentConfig.from_json(write_config(self.root, temporal=[6]))
        record = run_experiment(cfg, prepare_run(cfg))
        self.assertEqual([job["status"] for job in record.jobs], ["failed"] * 3)
        self.assertTrue(record.jobs[0]["error"].startswith("DataError"))
        self.assertEqual(record.aggregates, {})

    def test_fail_fast(self) -> None:
        cfg = ExperimentConfig.from_json(write_config(self.root, temporal=[6], fail_fast=True))
        with self.assertRaises(DataError):
            run_experiment(cfg, prepare_run(cfg))

    def test_missing_manifest(self) -> None:
        cfg = ExperimentConfig.from_json(write_config(self.root, manifest="elsewhere/manifest.json"))
        with self.assertRaises(ConfigurationError):
            run_experiment(cfg, prepare_run(cfg))


class CommandLine(TestCase):
    def setUp(self) -> None:
        self.tmp = TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self) -> None:
        self.tmp.cleanup()

    def test_synth_and_split(self) -> None:
        out = self.root / "data"
        args = ["synth", str(out), "--bonafide", "20", "--subjects", "20", "--geometry", "32", "32", "5"]
        self.assertEqual(main(args), 0)
        manifest = Manifest.read(out / "manifest.json")
        self.assertEqual(len(manifest), sum(default_counts(20).values()))
        plan_path = self.root / "plan.json"
        self.assertEqual(main(["split", str(out / "manifest.json"), "--strategy", "loao", "-o", str(plan_path)]), 0)
        self.assertEqual(len(json.loads(plan_path.read_text(encoding="utf-8"))["folds"]), 6)

    def test_train_eval_report(self) -> None:
        make_synth_dataset(self.root / "data", TINY_COUNTS, subjects=6, seed=2, geometry=(32, 32, 5))
        config = write_config(self.root, archs=["Lstm"])
        self.assertEqual(main(["train", str(config), "--seed", "4"]), 0)
        (run_dir,) = (self.root / "runs").iterdir()
        self.assertEqual(json.loads((run_dir / EFFECTIVE_CONFIG_FILE).read_text(encoding="utf-8"))["seed"], 4)
        self.assertEqual(main(["train", "--resume", str(run_dir), "--workers", "2"]), 0)
        self.assertEqual(main(["eval", str(run_dir)]), 0)
        self.assertEqual(main(["report", str(run_dir)]), 0)

    def test_bad_config_exits_with_one(self) -> None:
        self.assertEqual(main(["train", str(write_config(self.root, epochs=0))]), 1)
        self.assertEqual(main(["train", str(self.root / "missing.json")]), 1)
        self.assertEqual(main(["eval", str(self.root / "no-run")]), 1)

    def test_bad_flags_exit_with_one(self) -> None:
        config = write_config(self.root)
        self.assertEqual(main(["train", str(config), "--epochs", "ten"]), 1)
        self.assertEqual(main(["train", str(config), "--no-such-flag"]), 1)
        self.assertEqual(main(["split"]), 1)
        self.assertEqual(main(["explode"]), 1)
        self.assertEqual(main([]), 1)
        self.assertFalse((self.root / "runs").exists())

    def test_bad_data_exits_with_two(self) -> None:
        manifest = self.root / "manifest.json"
        manifest.write_text("{not json", encoding="utf-8")
        self.assertEqual(main(["split", str(manifest)]), 2)
        manifest.write_text(json.dumps([{"path": "a.lsc"}]), encoding="utf-8")
        self.assertEqual(main(["split", str(manifest)]), 2)


@skipUnless(SLOW, "set SPECKLEPAD_SLOW=1 to train the reference LSTM end to end")
class EndToEnd(TestCase):
    @classmethod
    def setUpClass(cls) -> None:
        cls.tmp = TemporaryDirectory()
        root = Path(cls.tmp.name)
        counts = {(Label.BonaFide, None): 60}
        counts.update({(Label.Attack, species): 10 for species in Species})
        make_synth_dataset(root / "data", counts, subjects=12, seed=0, geometry=(64, 64, 100), workers=4)
        config = write_config(root, archs=["Lstm"], temporal=[100], epochs=15, batch=64, workers=3)
        cfg = ExperimentConfig.from_json(config)
        cls.first = run_experiment(cfg, prepare_run(cfg))
        cls.second = run_experiment(cfg, prepare_run(cfg))

    @classmethod
    def tearDownClass(cls) -> None:
        cls.tmp.cleanup()

    def test_lstm_separates_synthetic_attacks_on_every_fold(self) -> None:
        self.assertEqual(len(self.first.jobs), 3)
        for entry in self.first.jobs:
            with self.subTest(job=entry["job"]):
                self.assertEqual(entry["status"], "ok")
                self.assertGreaterEqual(entry["report"]["auc"], 0.95)
                self.assertLessEqual(entry["report"]["acer"], 0.10)
        stats = self.first.aggregates["Lstm-8x8x100"]["stats"]
        self.assertGreaterEqual(stats["auc"]["mean"], 0.95)
        self.assertLessEqual(stats["acer"]["mean"], 0.10)

    def test_same_seed_same_reports(self) -> None:
        self.assertEqual(self.first.jobs, self.second.jobs)
        self.assertEqual(self.first.aggregates, self.second.aggregates)
