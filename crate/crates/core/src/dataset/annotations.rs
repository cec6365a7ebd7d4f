use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{
    frame_relpath, AuVector, DatasetSplit, FrameAnnotation, FrameRef, VideoRecord, NUM_AUS,
    NUM_EXPRESSIONS,
};
use crate::error::{Error, Result};

/// Frame rate assumed for videos missing from the fps table.
pub const DEFAULT_FPS: f64 = 30.0;

/// Read per-video AU and expression files into one split.
///
/// A frame whose AU line holds any `-1` keeps no AU vector; an expression of
/// `-1` keeps no expression; a frame left with neither label is omitted.
/// Either directory may be `None` (e.g. an AU-only auxiliary corpus).
pub fn parse_annotations(
    name: &str,
    au_dir: Option<&Path>,
    expr_dir: Option<&Path>,
) -> Result<DatasetSplit> {
    let mut au: BTreeMap<String, Vec<Option<AuVector>>> = BTreeMap::new();
    let mut expr: BTreeMap<String, Vec<Option<u8>>> = BTreeMap::new();
    if let Some(dir) = au_dir {
        for (vid, path) in list_txt(dir)? {
            au.insert(vid, parse_lines(&path, parse_au_line)?);
        }
    }
    if let Some(dir) = expr_dir {
        for (vid, path) in list_txt(dir)? {
            expr.insert(vid, parse_lines(&path, parse_expr_line)?);
        }
    }

    let mut split = DatasetSplit::new(name);
    let ids: std::collections::BTreeSet<&String> = au.keys().chain(expr.keys()).collect();
    for vid in ids {
        let a = au.get(vid).map(Vec::as_slice).unwrap_or(&[]);
        let e = expr.get(vid).map(Vec::as_slice).unwrap_or(&[]);
        let frames = a.len().max(e.len());
        for i in 0..frames {
            let au_i = a.get(i).copied().flatten();
            let ex_i = e.get(i).copied().flatten();
            if au_i.is_some() || ex_i.is_some() {
                split.annotations.push(FrameAnnotation {
                    video_id: vid.clone(),
                    frame_index: i,
                    au: au_i,
                    expr: ex_i,
                });
            }
        }
        split.videos.insert(
            vid.clone(),
            VideoRecord {
                video_id: vid.clone(),
                fps: DEFAULT_FPS,
                frame_paths: (0..frames)
                    .map(|i| FrameRef::Path(frame_relpath(vid, i)))
                    .collect(),
                audio: None,
            },
        );
    }
    Ok(split)
}

fn list_txt(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let p = entry.path();
        if p.extension().is_some_and(|x| x == "txt") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), p));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn parse_lines<T>(path: &Path, parse: fn(&str) -> Result<T, String>) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines: Vec<&str> = text.lines().collect();
    while lines.last().is_some_and(|l| l.trim().is_empty()) {
        lines.pop();
    }
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            parse(l.trim()).map_err(|msg| Error::Parse {
                file: path.to_path_buf(),
                line: i + 1,
                msg,
            })
        })
        .collect()
}

fn parse_int(tok: &str) -> Result<i64, String> {
    tok.trim()
        .parse::<i64>()
        .map_err(|_| format!("not an integer: {tok:?}"))
}

fn parse_au_line(line: &str) -> Result<Option<AuVector>, String> {
    let toks: Vec<&str> = line.split(',').collect();
    if toks.len() != NUM_AUS {
        return Err(format!(
            "expected {NUM_AUS} comma-separated values, found {}",
            toks.len()
        ));
    }
    let mut au = [0u8; NUM_AUS];
    let mut invalid = false;
    for (slot, tok) in au.iter_mut().zip(toks) {
        match parse_int(tok)? {
            -1 => invalid = true,
            v @ (0 | 1) => *slot = v as u8,
            v => return Err(format!("AU value {v} not in {{-1, 0, 1}}")),
        }
    }
    Ok((!invalid).then_some(au))
}

fn parse_expr_line(line: &str) -> Result<Option<u8>, String> {
    if line.contains(',') {
        return Err("expected a single expression value".into());
    }
    match parse_int(line)? {
        -1 => Ok(None),
        v if (0..NUM_EXPRESSIONS as i64).contains(&v) => Ok(Some(v as u8)),
        v => Err(format!("expression value {v} not in [-1, 6]")),
    }
}

/// Write the split back in the per-video text format. Frames without a label
/// for a task are written as `-1`. Files are only written for videos that
/// carry at least one label of that task.
pub fn write_annotations(split: &DatasetSplit, au_dir: &Path, expr_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(au_dir).map_err(|e| Error::io(au_dir, e))?;
    std::fs::create_dir_all(expr_dir).map_err(|e| Error::io(expr_dir, e))?;
    for (vid, video) in &split.videos {
        let anns = split.video_annotations(vid);
        let n = anns
            .iter()
            .map(|a| a.frame_index + 1)
            .max()
            .unwrap_or(0)
            .max(video.frame_count());
        let mut au_rows: Vec<Option<AuVector>> = vec![None; n];
        let mut ex_rows: Vec<Option<u8>> = vec![None; n];
        for a in anns {
            au_rows[a.frame_index] = a.au;
            ex_rows[a.frame_index] = a.expr;
        }
        if au_rows.iter().any(Option::is_some) {
            let mut s = String::new();
            for row in &au_rows {
                match row {
                    Some(au) => {
                        let toks: Vec<String> = au.iter().map(u8::to_string).collect();
                        writeln!(s, "{}", toks.join(",")).unwrap();
                    }
                    None => writeln!(s, "{}", vec!["-1"; NUM_AUS].join(",")).unwrap(),
                }
            }
            let p = au_dir.join(format!("{vid}.txt"));
            std::fs::write(&p, s).map_err(|e| Error::io(&p, e))?;
        }
        if ex_rows.iter().any(Option::is_some) {
            let mut s = String::new();
            for row in &ex_rows {
                match row {
                    Some(e) => writeln!(s, "{e}").unwrap(),
                    None => writeln!(s, "-1").unwrap(),
                }
            }
            let p = expr_dir.join(format!("{vid}.txt"));
            std::fs::write(&p, s).map_err(|e| Error::io(&p, e))?;
        }
    }
    Ok(())
}

/// Optional `video_id,fps` table (with header) describing frame rates.
pub fn read_fps_table(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            file: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let (vid, fps) = line
            .split_once(',')
            .ok_or_else(|| parse_err("expected video_id,fps".into()))?;
        let fps: f64 = fps
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad fps {fps:?}")))?;
        if !(fps > 0.0) {
            return Err(parse_err(format!("fps must be positive, got {fps}")));
        }
        out.insert(vid.trim().to_string(), fps);
    }
    Ok(out)
}

pub fn write_fps_table(path: &Path, videos: &[&VideoRecord]) -> Result<()> {
    let mut s = String::from("video_id,fps\n");
    for v in videos {
        writeln!(s, "{},{}", v.video_id, v.fps).unwrap();
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}
