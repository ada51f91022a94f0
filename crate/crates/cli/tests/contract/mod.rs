//! End-to-end run of every subcommand against a built binary.
#![allow(dead_code)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use softpose::data::{joint_color, load_annotations, normalize_annotation, CropConfig, Image};
use softpose::{Float, Pose};

pub struct Contract {
    pub bin: PathBuf,
    pub dir: PathBuf,
    /// Fewer gradient-check instances, for the quick test suite.
    pub quick: bool,
}

fn text(out: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    )
}

impl Contract {
    pub fn run(&self, args: &[&str]) -> Output {
        Command::new(&self.bin)
            .args(args)
            .current_dir(&self.dir)
            .output()
            .unwrap_or_else(|e| panic!("cannot run {}: {e}", self.bin.display()))
    }

    fn ok(&self, args: &[&str]) -> Result<String, String> {
        let out = self.run(args);
        if out.status.success() {
            Ok(String::from_utf8_lossy(&out.stdout).into_owned())
        } else {
            Err(format!("`softpose {}` exited {:?}:\n{}", args.join(" "), out.status.code(), text(&out)))
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    pub fn gradcheck(&self) -> Result<(), String> {
        let mut args = vec!["gradcheck", "--preset", "desk"];
        if self.quick {
            args.extend(["--instances", "2"]);
        }
        let out = self.ok(&args)?;
        if out.contains("FAIL") || !out.contains("model_end_to_end") {
            return Err(format!("unexpected gradcheck table:\n{out}"));
        }
        Ok(())
    }

    pub fn synth(&self) -> Result<(), String> {
        self.ok(&["synth", "--out", "train", "--count", "48"])?;
        self.ok(&["synth", "--out", "val", "--start", "48", "--count", "16"])?;
        let anns = load_annotations(&self.path("val/annotations.jsonl")).map_err(|e| e.to_string())?;
        if anns.len() != 16 || !self.path("val/images/000063.png").exists() {
            return Err("synth output incomplete".into());
        }
        Ok(())
    }

    pub fn train(&self) -> Result<(), String> {
        let out = self.ok(&[
            "train",
            "--data",
            "train/annotations.jsonl",
            "--val",
            "val/annotations.jsonl",
            "--out",
            "run",
            "--epochs",
            "2",
        ])?;
        let log = std::fs::read_to_string(self.path("run/runlog.jsonl")).map_err(|e| e.to_string())?;
        if log.lines().count() != 2 || !self.path("run/last/manifest.txt").exists() || !self.path("run/best/manifest.txt").exists() {
            return Err(format!("train outputs incomplete:\n{out}"));
        }
        Ok(())
    }

    pub fn eval_checkpoint(&self) -> Result<(), String> {
        let out = self.ok(&["eval", "--data", "val/annotations.jsonl", "--checkpoint", "run/best"])?;
        if !out.lines().next().is_some_and(|h| h.ends_with(",Mean")) {
            return Err(format!("unexpected eval table:\n{out}"));
        }
        Ok(())
    }

    /// Writes ground truth as predictions and checks every column reads 100.0.
    pub fn eval_perfect(&self) -> Result<(), String> {
        let anns = load_annotations(&self.path("val/annotations.jsonl")).map_err(|e| e.to_string())?;
        let mut lines = String::new();
        for a in &anns {
            let pose: Pose = normalize_annotation(a, &CropConfig::default()).map_err(|e| e.to_string())?;
            let _ = writeln!(lines, "{}", serde_json::to_string(&pose).unwrap());
        }
        std::fs::write(self.path("perfect.jsonl"), lines).map_err(|e| e.to_string())?;
        for metric in ["pck", "pckh", "pcp"] {
            let out = self.ok(&[
                "eval",
                "--data",
                "val/annotations.jsonl",
                "--predictions",
                "perfect.jsonl",
                "--metric",
                metric,
            ])?;
            let rows: Vec<&str> = out.lines().collect();
            if rows.len() != 2 || rows[1].split(',').any(|v| v != "100.0") {
                return Err(format!("{metric} on perfect predictions:\n{out}"));
            }
        }
        Ok(())
    }

    /// Predicts, then finds each joint's marker in the overlay and checks it
    /// sits on the predicted location.
    pub fn predict(&self) -> Result<(), String> {
        self.ok(&[
            "predict",
            "--checkpoint",
            "run/last",
            "--data",
            "val/annotations.jsonl",
            "--out",
            "pred",
            "--zoom",
            "4",
            "--max-images",
            "4",
        ])?;
        let text = std::fs::read_to_string(self.path("pred/predictions.jsonl")).map_err(|e| e.to_string())?;
        let poses: Vec<Pose> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        if poses.len() != 16 {
            return Err(format!("{} predictions", poses.len()));
        }
        let mut whole_markers = 0;
        for (i, pose) in poses.iter().take(4).enumerate() {
            let overlay = Image::load_png(&self.path(&format!("pred/overlay_{i:06}.png"))).map_err(|e| e.to_string())?;
            if !self.path(&format!("pred/heatmaps_{i:06}.png")).exists() {
                return Err(format!("heat-map mosaic {i} missing"));
            }
            let (w, h) = (overlay.width(), overlay.height());
            let nj = pose.num_joints();
            for (j, p) in pose.joints.iter().enumerate() {
                let want = joint_color(j, nj).map(|c| (c * 255.0).round() / 255.0);
                let mut pixels = Vec::new();
                for y in 0..h {
                    for x in 0..w {
                        let got = overlay.pixel(x, y);
                        if (0..3).all(|c| (got[c] - want[c]).abs() < 1e-9) {
                            pixels.push((x as Float + 0.5, y as Float + 0.5));
                        }
                    }
                }
                // Markers of later joints may cover part of this one; only
                // complete 3×3 markers have a well-defined center.
                if pixels.len() != 9 {
                    continue;
                }
                let cx = pixels.iter().map(|q| q.0).sum::<Float>() / 9.0;
                let cy = pixels.iter().map(|q| q.1).sum::<Float>() / 9.0;
                let (px, py) = (p[0] * w as Float, p[1] * h as Float);
                if (cx - px).hypot(cy - py) > 1.0 {
                    return Err(format!("image {i} joint {j}: marker at ({cx}, {cy}), pose says ({px:.2}, {py:.2})"));
                }
                whole_markers += 1;
            }
        }
        if whole_markers == 0 {
            return Err("no complete joint markers found in overlays".into());
        }
        Ok(())
    }

    pub fn exit_codes(&self) -> Result<(), String> {
        let bad_flag = self.run(&["train", "--no-such-flag"]);
        let bad_key = self.run(&["gradcheck", "--set", "train.no_such_key=1"]);
        let help = self.run(&["--help"]);
        match (bad_flag.status.code(), bad_key.status.code(), help.status.code()) {
            (Some(2), Some(2), Some(0)) => Ok(()),
            codes => Err(format!("exit codes {codes:?}")),
        }
    }

    /// Every step in order; the first failure is returned.
    pub fn all(&self) -> Result<(), String> {
        self.gradcheck()?;
        self.synth()?;
        self.train()?;
        self.eval_checkpoint()?;
        self.eval_perfect()?;
        self.predict()?;
        self.exit_codes()
    }
}

pub fn workspace_root() -> &'static Path {
    Path::new(env!("CARGO_MANIFEST_DIR")).parent().and_then(Path::parent).unwrap()
}
