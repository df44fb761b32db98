//! Orchestration of the full pipeline: staged execution with a resumable
//! manifest, batch rendering of composed outputs, and scene validation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::background::{
    init_background, init_progressive, run_outpaint_loop, BackgroundBundle,
};
use crate::backends::make_backends;
use crate::composer::{
    compose_scene, foreground_depth_shift, relative_depth_scale, render_composed,
    rescale_trajectory, screen_scale_factor, SceneBundle,
};
use crate::config::PipelineConfig;
use crate::error::{CocoError, Result};
use crate::foreground::{
    normalize_frames, optimize_motion, reconstruct_static, refine_trajectory, ForegroundBundle,
    Trajectory,
};
use crate::geometry::{build_schedule, make_lookat_camera, CameraPose, CameraSchedule};
use crate::img::{psnr, Image, VideoBundle};
use crate::scene::{DeformationField, GaussianSet};
use crate::video_io::{save_frames_png, write_mp4};

/// Stable per-stage seed: the run seed mixed with an FNV-1a hash of the
/// stage name, so one stage's sampling never perturbs another's.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in stage.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    seed ^ h
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: String,
    pub wall_clock_secs: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_curve: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// The run manifest: one record per stage, written after every stage so
/// an interrupted run can resume.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub stages: Vec<StageRecord>,
}

impl Manifest {
    fn path(out_dir: &Path) -> PathBuf {
        out_dir.join("manifest.json")
    }

    pub fn load_or_new(out_dir: &Path) -> Result<Manifest> {
        let p = Self::path(out_dir);
        if p.exists() {
            Ok(serde_json::from_str(&std::fs::read_to_string(&p)?)?)
        } else {
            Ok(Manifest::default())
        }
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        std::fs::write(Self::path(out_dir), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn completed(&self, name: &str) -> bool {
        self.stages
            .iter()
            .any(|s| s.name == name && s.status == "completed")
    }

    fn record(&mut self, rec: StageRecord) {
        if let Some(slot) = self.stages.iter_mut().find(|s| s.name == rec.name) {
            *slot = rec;
        } else {
            self.stages.push(rec);
        }
    }
}

/// Names of all manifest stages for a run with `loops` outpaint loops.
pub fn stage_names(loops: usize) -> Vec<String> {
    let mut out = vec![
        "reference-video".to_string(),
        "segmentation".to_string(),
        "fg-static".to_string(),
        "fg-motion".to_string(),
        "fg-trajectory".to_string(),
        "bg-init".to_string(),
    ];
    for l in 1..=loops {
        out.push(format!("bg-loop-{l}"));
    }
    out.push("composition".to_string());
    out
}

struct StageRunner<'a> {
    manifest: &'a mut Manifest,
    out_dir: &'a Path,
}

impl StageRunner<'_> {
    /// Runs `body` unless the stage is already completed; records timing,
    /// loss curve, and failure in the manifest either way.
    fn run(
        &mut self,
        name: &str,
        body: impl FnOnce() -> Result<Option<Vec<f64>>>,
    ) -> Result<()> {
        if self.manifest.completed(name) {
            return Ok(());
        }
        let start = Instant::now();
        match body() {
            Ok(curve) => {
                self.manifest.record(StageRecord {
                    name: name.to_string(),
                    status: "completed".to_string(),
                    wall_clock_secs: start.elapsed().as_secs_f64(),
                    loss_curve: curve,
                    error: None,
                });
                self.manifest.save(self.out_dir)
            }
            Err(e) => {
                self.manifest.record(StageRecord {
                    name: name.to_string(),
                    status: "failed".to_string(),
                    wall_clock_secs: start.elapsed().as_secs_f64(),
                    loss_curve: None,
                    error: Some(e.to_string()),
                });
                self.manifest.save(self.out_dir)?;
                Err(e.in_stage(name))
            }
        }
    }
}

/// Builds the camera schedule at the projection resolution.
fn schedule_for(config: &PipelineConfig) -> Result<CameraSchedule> {
    let mut sc = config.schedule.clone();
    sc.resolution = (config.projection_resolution, config.projection_resolution);
    build_schedule(&sc)
}

/// Runs the full pipeline into `out_dir`, resuming from the manifest if
/// earlier stages already completed. Returns the persisted scene.
pub fn run(config: &PipelineConfig, out_dir: &Path) -> Result<SceneBundle> {
    config.check()?;
    std::fs::create_dir_all(out_dir)?;
    config.save(&out_dir.join("config.json"))?;
    let mut manifest = Manifest::load_or_new(out_dir)?;
    let backends = make_backends(&config.backends)?;
    let schedule = schedule_for(config)?;
    let seen = schedule.reference;
    let stages_dir = out_dir.join("stages");
    std::fs::create_dir_all(&stages_dir)?;
    let mut runner = StageRunner {
        manifest: &mut manifest,
        out_dir,
    };

    // Stage 1: reference video. The backend is a deterministic function
    // of (prompt, image, seed), so the bundle is regenerated in memory on
    // every run; the stage record and preview artifacts are written once.
    let image = match &config.image_path {
        Some(p) => Some(Image::load_png(Path::new(p))?),
        None => None,
    };
    let video = backends.generate_reference_video(
        &config.prompt,
        image.as_ref(),
        stage_seed(config.seed, "reference-video"),
        config.n_frames,
        config.projection_resolution,
    )?;
    {
        let dir = stages_dir.join("ref_video");
        let frames = &video.frames;
        runner.run("reference-video", || {
            save_frames_png(&dir, "frame", frames)?;
            write_mp4(&dir.join("reference.mp4"), frames, 8)?;
            Ok(None)
        })?;
    }

    // Stage 2: segmentation (also deterministic; recomputed each run).
    let seg = backends.segment_video(&video)?;
    {
        let dir = stages_dir.join("segmentation");
        let seg_ref = &seg;
        runner.run("segmentation", || {
            std::fs::create_dir_all(&dir)?;
            save_frames_png(&dir.join("fg"), "frame", &seg_ref.fg.frames)?;
            save_frames_png(&dir.join("bg"), "frame", &seg_ref.bg.frames)?;
            let mdir = dir.join("masks");
            std::fs::create_dir_all(&mdir)?;
            for (i, m) in seg_ref.masks.iter().enumerate() {
                m.save_png(&mdir.join(format!("mask_{:04}.png", i + 1)))?;
            }
            Ok(None)
        })?;
    }
    let (centered, traj_init) = normalize_frames(&seg.fg)?;

    // Stage 3: static foreground. Persisted then reloaded, so resumed and
    // uninterrupted runs continue from identical bits.
    let fg_ply = stages_dir.join("fg_static.ply");
    {
        let first = &centered.frames[0];
        let ply = &fg_ply;
        let b = backends.as_ref();
        let hyper = &config.foreground;
        let seed = stage_seed(config.seed, "fg-static");
        runner.run("fg-static", || {
            let (set, log) = reconstruct_static(first, &seen, b, hyper, seed)?;
            set.save_ply(ply)?;
            Ok(Some(log.total))
        })?;
    }
    let mut fg_set = GaussianSet::load_ply(&fg_ply)?;
    fg_set.frozen = true;

    // Stage 4: foreground motion field.
    let fg_blob = stages_dir.join("fg_deform.bin");
    let fg_head = stages_dir.join("fg_deform.json");
    {
        let set = &fg_set;
        let vid = &centered;
        let b = backends.as_ref();
        let hyper = &config.foreground;
        let (blob, head) = (&fg_blob, &fg_head);
        let seed = stage_seed(config.seed, "fg-motion");
        runner.run("fg-motion", || {
            let (field, log) = optimize_motion(set, &seen, vid, b, hyper, seed)?;
            field.save(blob, head)?;
            Ok(Some(log.total))
        })?;
    }
    let fg_field = DeformationField::load(&fg_blob, &fg_head)?;

    // Stage 5: trajectory refinement against the uncentered foreground.
    let traj_path = stages_dir.join("trajectory.json");
    {
        let (set, field) = (&fg_set, &fg_field);
        let fg_video = &seg.fg;
        let init = &traj_init;
        let hyper = &config.foreground;
        let path = &traj_path;
        runner.run("fg-trajectory", || {
            let traj = refine_trajectory(set, field, &seen, fg_video, init, hyper)?;
            traj.save(path)?;
            Ok(None)
        })?;
    }
    let trajectory = Trajectory::load(&traj_path)?;
    let foreground = ForegroundBundle {
        gaussians: fg_set,
        field: fg_field,
        trajectory,
        seen_view: seen,
    };

    // Stage 6: background initialization + reference-only field training.
    let bg_dir = stages_dir.join("bg");
    let bg_seed = stage_seed(config.seed, "background");
    {
        let b = backends.as_ref();
        let hyper = &config.background;
        let seg_ref = &seg;
        let dir = &bg_dir;
        let init_seed = stage_seed(config.seed, "bg-init");
        let prompt = &config.prompt;
        let gamma_max = config.sds_noise_ratio;
        runner.run("bg-init", || {
            let set = init_background(
                &seg_ref.bg.frames[0],
                Some(&seg_ref.masks[0]),
                &seen,
                prompt,
                b,
                hyper,
                gamma_max,
                init_seed,
            )?;
            let (bundle, curve) =
                init_progressive(set, &seen, &seg_ref.bg, &seg_ref.masks, hyper, bg_seed)?;
            bundle.save(dir)?;
            Ok(Some(curve))
        })?;
    }

    // Stages 7..: one manifest stage per progressive outpaint loop; the
    // bundle round-trips through disk between loops.
    for (li, cameras) in schedule.loops.iter().enumerate() {
        let name = format!("bg-loop-{}", li + 1);
        let b = backends.as_ref();
        let hyper = &config.background;
        let dir = &bg_dir;
        let prompt = &config.prompt;
        let gamma_max = config.sds_noise_ratio;
        let strength = config.strength;
        let n_frames = config.n_frames;
        runner.run(&name, || {
            let mut bundle = BackgroundBundle::load(dir)?;
            let curve = run_outpaint_loop(
                &mut bundle,
                li + 1,
                cameras,
                n_frames,
                prompt,
                strength,
                b,
                hyper,
                gamma_max,
                bg_seed,
            )?;
            bundle.save(dir)?;
            Ok(Some(curve))
        })?;
    }

    // Final stage: composition into the scene directory, plus the
    // reference video stored beside it for later PSNR reports.
    let scene_dir = out_dir.join("scene");
    {
        let fg_ref = &foreground;
        let b = backends.as_ref();
        let seg_ref = &seg;
        let frames = &video.frames;
        let dir = &scene_dir;
        let bg = &bg_dir;
        let prompt = &config.prompt;
        let rule = config.trajectory_rule;
        runner.run("composition", || {
            let bg_bundle = BackgroundBundle::load(bg)?;
            compose_scene(
                fg_ref.clone(),
                bg_bundle,
                &frames[0],
                &seg_ref.masks,
                b,
                prompt,
                rule,
                dir,
            )?;
            save_frames_png(&dir.join("ref_video"), "frame", frames)?;
            Ok(None)
        })?;
    }
    SceneBundle::load(&scene_dir)
}

/// Camera selection for batch rendering.
#[derive(Debug, Clone, PartialEq)]
pub enum CameraSpec {
    /// The reference camera plus every trained outpaint pose.
    Schedule,
    /// A 12-step azimuth sweep at the reference elevation.
    Orbit,
    /// Explicit (elevation, azimuth) pairs in degrees.
    List(Vec<(f64, f64)>),
}

impl CameraSpec {
    /// Parses "schedule", "orbit", or "elev,azim[;elev,azim…]".
    pub fn parse(text: &str) -> Result<CameraSpec> {
        match text {
            "schedule" => Ok(CameraSpec::Schedule),
            "orbit" => Ok(CameraSpec::Orbit),
            other => {
                let mut pairs = Vec::new();
                for part in other.split(';').filter(|p| !p.trim().is_empty()) {
                    let nums: Vec<&str> = part.split(',').collect();
                    if nums.len() != 2 {
                        return Err(CocoError::InvalidArgument(format!(
                            "camera spec '{part}' is not 'elev,azim'"
                        )));
                    }
                    let elev: f64 = nums[0].trim().parse().map_err(|_| {
                        CocoError::InvalidArgument(format!("bad elevation '{}'", nums[0]))
                    })?;
                    let azim: f64 = nums[1].trim().parse().map_err(|_| {
                        CocoError::InvalidArgument(format!("bad azimuth '{}'", nums[1]))
                    })?;
                    pairs.push((elev, azim));
                }
                if pairs.is_empty() {
                    return Err(CocoError::InvalidArgument(format!(
                        "camera spec '{other}' matches no preset and lists no poses"
                    )));
                }
                Ok(CameraSpec::List(pairs))
            }
        }
    }
}

/// Timestamp selection for batch rendering (1-based frame indices).
#[derive(Debug, Clone, PartialEq)]
pub enum TimeSpec {
    All,
    List(Vec<usize>),
}

impl TimeSpec {
    /// Parses "all", "" (empty list), or "1,2,5".
    pub fn parse(text: &str) -> Result<TimeSpec> {
        if text == "all" {
            return Ok(TimeSpec::All);
        }
        let mut out = Vec::new();
        for part in text.split(',').filter(|p| !p.trim().is_empty()) {
            out.push(part.trim().parse::<usize>().map_err(|_| {
                CocoError::InvalidArgument(format!("bad frame index '{part}'"))
            })?);
        }
        Ok(TimeSpec::List(out))
    }
}

fn lookat_like(reference: &CameraPose, elev: f64, azim: f64) -> Result<CameraPose> {
    make_lookat_camera(
        elev,
        azim,
        reference.radius,
        reference.fovy_deg,
        reference.near,
        reference.far,
        reference.resolution,
    )
}

fn resolve_cameras(scene: &SceneBundle, spec: &CameraSpec) -> Result<Vec<CameraPose>> {
    let seen = scene.metadata.seen_view;
    match spec {
        CameraSpec::Schedule => {
            Ok(scene.background.trained_views.iter().map(|v| v.camera).collect())
        }
        CameraSpec::Orbit => (0..12)
            .map(|k| lookat_like(&seen, seen.elevation_deg, 30.0 * k as f64))
            .collect(),
        CameraSpec::List(pairs) => pairs
            .iter()
            .map(|&(e, a)| lookat_like(&seen, e, a))
            .collect(),
    }
}

/// Summary of a batch render.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RenderReport {
    pub cameras: usize,
    pub frames_written: usize,
    /// Per-frame PSNR vs the reference video, present when the reference
    /// camera was rendered and the scene stores the reference frames.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_psnr: Option<Vec<f64>>,
}

/// Renders the composed scene for the selected cameras and timestamps,
/// writing PNG sequences and an MP4 per camera into `out_dir`.
pub fn render_outputs(
    scene_dir: &Path,
    cameras: &CameraSpec,
    times: &TimeSpec,
    out_dir: &Path,
) -> Result<RenderReport> {
    let scene = SceneBundle::load(scene_dir)?;
    let cams = resolve_cameras(&scene, cameras)?;
    let n = scene.metadata.n_frames;
    let frame_indices: Vec<usize> = match times {
        TimeSpec::All => (1..=n).collect(),
        TimeSpec::List(l) => {
            for &t in l {
                if t == 0 || t > n {
                    return Err(CocoError::InvalidArgument(format!(
                        "frame index {t} outside [1, {n}]"
                    )));
                }
            }
            l.clone()
        }
    };
    std::fs::create_dir_all(out_dir)?;
    let mut written = 0usize;
    let mut reference_psnr = None;
    for (ci, cam) in cams.iter().enumerate() {
        let cdir = out_dir.join(format!("camera_{ci:02}"));
        std::fs::create_dir_all(&cdir)?;
        let mut frames = Vec::with_capacity(frame_indices.len());
        for &t in &frame_indices {
            let composed = render_composed(&scene, cam, t, true)?;
            composed
                .rgb
                .save_png(&cdir.join(format!("frame_{t:04}.png")))?;
            frames.push(composed.rgb);
            written += 1;
        }
        if !frames.is_empty() {
            write_mp4(&cdir.join(format!("camera_{ci:02}.mp4")), &frames, 8)?;
        }
        // PSNR report against the stored reference video when this is the
        // reference camera.
        let ref_dir = scene_dir.join("ref_video");
        if *cam == scene.metadata.seen_view && ref_dir.exists() && !frames.is_empty() {
            let mut report = Vec::new();
            for (fi, &t) in frame_indices.iter().enumerate() {
                let target = Image::load_png(&ref_dir.join(format!("frame_{t:04}.png")))?;
                report.push(psnr(&frames[fi], &target));
            }
            std::fs::write(
                out_dir.join("psnr_report.json"),
                serde_json::to_string_pretty(&report)?,
            )?;
            reference_psnr = Some(report);
        }
    }
    Ok(RenderReport {
        cameras: cams.len(),
        frames_written: written,
        reference_psnr,
    })
}

/// Outcome of scene validation: empty `failures` means the scene passed.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ValidationReport {
    pub failures: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.failures.is_empty()
    }

    fn check(&mut self, name: &str, result: Result<()>) {
        if let Err(e) = result {
            self.failures.push(format!("{name}: {e}"));
        }
    }

    fn require(&mut self, name: &str, ok: bool, detail: String) {
        if !ok {
            self.failures.push(format!("{name}: {detail}"));
        }
    }
}

fn bits_equal(a: f64, b: f64) -> bool {
    a.to_bits() == b.to_bits()
}

/// Checks every persisted invariant and re-derives the composition
/// parameters from the stored raw inputs, requiring bit-for-bit equality
/// with the stored values.
pub fn validate_scene(scene_dir: &Path) -> Result<ValidationReport> {
    let scene = SceneBundle::load(scene_dir)?;
    let mut rep = ValidationReport::default();
    let n = scene.metadata.n_frames;

    rep.check("foreground gaussians", scene.foreground.gaussians.check());
    rep.check("background gaussians", scene.background.gaussians.check());
    rep.check("foreground trajectory", scene.foreground.trajectory.check());
    rep.check("composition params", scene.params.check());
    rep.require(
        "trajectory length",
        scene.foreground.trajectory.n == n,
        format!("{} != {n}", scene.foreground.trajectory.n),
    );
    rep.require(
        "composed trajectory length",
        scene.params.composed_trajectory.n == n,
        format!("{} != {n}", scene.params.composed_trajectory.n),
    );
    for (vi, view) in scene.background.trained_views.iter().enumerate() {
        rep.require(
            "trained view strength",
            (0.0..=1.0).contains(&view.strength),
            format!("view {vi}: {}", view.strength),
        );
        rep.require(
            "trained view frame count",
            view.video.len() == n,
            format!("view {vi}: {} != {n}", view.video.len()),
        );
    }

    // Exact re-derivation of the composition parameters from the stored
    // raw depth maps, masks, and trajectory.
    match relative_depth_scale(&scene.bg_depth, &scene.ref_depth, &scene.fg_mask) {
        Ok(delta) => {
            rep.require(
                "delta re-derivation",
                bits_equal(delta, scene.params.delta),
                format!("recomputed {delta} vs stored {}", scene.params.delta),
            );
            match foreground_depth_shift(&scene.ref_depth, &scene.fg_mask, delta, &scene.bg_depth)
            {
                Ok(df) => rep.require(
                    "depth-shift re-derivation",
                    bits_equal(df, scene.params.depth_shift),
                    format!("recomputed {df} vs stored {}", scene.params.depth_shift),
                ),
                Err(e) => rep.failures.push(format!("depth-shift re-derivation: {e}")),
            }
        }
        Err(e) => rep.failures.push(format!("delta re-derivation: {e}")),
    }
    match screen_scale_factor(&scene.rendered_fg_mask, &scene.fg_mask) {
        Ok(eps) => {
            rep.require(
                "epsilon re-derivation",
                bits_equal(eps, scene.params.epsilon),
                format!("recomputed {eps} vs stored {}", scene.params.epsilon),
            );
            match rescale_trajectory(
                &scene.foreground.trajectory,
                eps,
                scene.metadata.trajectory_rule,
            ) {
                Ok(hat) => {
                    let stored = &scene.params.composed_trajectory;
                    let mut same = hat.n == stored.n;
                    if same {
                        for i in 0..hat.n {
                            same &= bits_equal(hat.shifts[i][0], stored.shifts[i][0])
                                && bits_equal(hat.shifts[i][1], stored.shifts[i][1])
                                && bits_equal(hat.scales[i], stored.scales[i]);
                        }
                    }
                    rep.require(
                        "composed-trajectory re-derivation",
                        same,
                        "recomputed trajectory differs from stored".to_string(),
                    );
                }
                Err(e) => rep
                    .failures
                    .push(format!("composed-trajectory re-derivation: {e}")),
            }
        }
        Err(e) => rep.failures.push(format!("epsilon re-derivation: {e}")),
    }
    Ok(rep)
}

/// Writes the deterministic synthetic world (reference video, masks, and
/// first-frame depth) for inspection and external tests.
pub fn export_mock_world(
    seed: u64,
    n_frames: usize,
    resolution: usize,
    out_dir: &Path,
) -> Result<()> {
    let backends = make_backends(&crate::config::BackendConfig::default())?;
    let video: VideoBundle = backends.generate_reference_video(
        "synthetic oracle world",
        None,
        seed,
        n_frames,
        resolution,
    )?;
    let seg = backends.segment_video(&video)?;
    std::fs::create_dir_all(out_dir)?;
    save_frames_png(&out_dir.join("frames"), "frame", &video.frames)?;
    write_mp4(&out_dir.join("reference.mp4"), &video.frames, 8)?;
    let mdir = out_dir.join("masks");
    std::fs::create_dir_all(&mdir)?;
    for (i, m) in seg.masks.iter().enumerate() {
        m.save_png(&mdir.join(format!("mask_{:04}.png", i + 1)))?;
    }
    let depth = backends.estimate_depth(&video.frames[0])?;
    depth.save_f32(&out_dir.join("depth_0001.f32"))?;
    let camera = crate::backends::mock::seen_view((resolution, resolution));
    std::fs::write(
        out_dir.join("camera.json"),
        serde_json::to_string_pretty(&camera)?,
    )?;
    Ok(())
}
