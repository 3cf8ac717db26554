//! Sample directories: binary event files with optional sidecars plus an
//! `index.csv` of `file,label` rows.

use std::fs;
use std::path::{Path, PathBuf};

use evtplus::events::{
    read_depth_file, read_event_file, read_image_file, synth_depth_scene, synth_gesture_stream,
    write_depth_file, write_event_file, write_image_file, DepthSceneConfig, EventStream,
};

use crate::config::{RunConfig, TaskKind};
use crate::CliError;

pub const INDEX_FILE: &str = "index.csv";
pub const CONFIG_FILE: &str = "config.txt";

fn data_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

fn sample_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

/// Writes `count` synthetic recordings. Gesture labels cycle through the
/// classes in order.
pub fn generate(
    task: TaskKind,
    out: &Path,
    seed: u64,
    count: usize,
    cfg: &RunConfig,
) -> Result<(), CliError> {
    fs::create_dir_all(out).map_err(|e| data_err(out, e))?;
    let geo = cfg.geometry()?;
    let duration = cfg.int("duration_us");
    let mut index = String::from("file,label\n");
    for i in 0..count {
        let stem = format!("sample_{i:05}");
        let evt = out.join(format!("{stem}.evt"));
        let s = sample_seed(seed, i);
        match task {
            TaskKind::Clf => {
                let classes = cfg.usize("classes")?;
                if classes == 0 {
                    return Err(CliError::Usage("`classes` must be positive".into()));
                }
                let label = (i % classes) as u32;
                let stream = synth_gesture_stream(label, s, geo, duration, cfg.float("rate_hz"))
                    .map_err(|e| CliError::Usage(e.to_string()))?;
                write_event_file(&stream, &evt).map_err(|e| data_err(&evt, e))?;
                index.push_str(&format!("{stem}.evt,{label}\n"));
            }
            TaskKind::Depth => {
                let scene = DepthSceneConfig {
                    min_depth: cfg.float("scene_min_depth"),
                    max_depth: cfg.float("scene_max_depth"),
                    image_rate_hz: cfg.float("image_rate_hz"),
                    depth_rate_hz: cfg.float("depth_rate_hz"),
                    invalid_fraction: cfg.float("invalid_fraction"),
                    camera_speed: cfg.float("camera_speed"),
                    ..DepthSceneConfig::default()
                };
                let stream = synth_depth_scene(s, geo, duration, &scene)
                    .map_err(|e| CliError::Usage(e.to_string()))?;
                write_event_file(&stream, &evt).map_err(|e| data_err(&evt, e))?;
                let img = out.join(format!("{stem}.img"));
                write_image_file(geo, &stream.images, &img).map_err(|e| data_err(&img, e))?;
                let dep = out.join(format!("{stem}.dep"));
                write_depth_file(geo, &stream.depth_maps, &dep).map_err(|e| data_err(&dep, e))?;
                index.push_str(&format!("{stem}.evt,\n"));
            }
        }
    }
    let idx = out.join(INDEX_FILE);
    fs::write(&idx, index).map_err(|e| data_err(&idx, e))?;
    let c = out.join(CONFIG_FILE);
    fs::write(&c, cfg.to_text()).map_err(|e| data_err(&c, e))?;
    Ok(())
}

/// Reads one recording with its `.img` / `.dep` sidecars when present.
pub fn read_stream(path: &Path) -> Result<EventStream, CliError> {
    let mut stream = read_event_file(path).map_err(|e| data_err(path, e))?;
    let side = |ext: &str| -> PathBuf { path.with_extension(ext) };
    let img = side("img");
    let images = img
        .exists()
        .then(|| read_image_file(&img))
        .transpose()
        .map_err(|e| data_err(&img, e))?;
    let dep = side("dep");
    let depth = dep
        .exists()
        .then(|| read_depth_file(&dep))
        .transpose()
        .map_err(|e| data_err(&dep, e))?;
    stream
        .attach_sidecars(images, depth)
        .map_err(|e| data_err(path, e))?;
    Ok(stream)
}

/// Every recording listed in the directory's index, with its label.
pub fn load_dir(dir: &Path) -> Result<Vec<(EventStream, Option<u32>)>, CliError> {
    let idx = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&idx).map_err(|e| data_err(&idx, e))?;
    let mut lines = text.lines();
    if lines.next() != Some("file,label") {
        return Err(data_err(&idx, "missing `file,label` header"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (file, label) = l
                .split_once(',')
                .ok_or_else(|| data_err(&idx, format!("bad row `{l}`")))?;
            let label = match label.trim() {
                "" => None,
                v => Some(
                    v.parse()
                        .map_err(|_| data_err(&idx, format!("bad label `{v}`")))?,
                ),
            };
            Ok((read_stream(&dir.join(file.trim()))?, label))
        })
        .collect()
}
