//! Video persistence: numbered PNG sequences, whole [`VideoBundle`]
//! directories, and a minimal self-contained MP4 writer (Motion-JPEG
//! samples in an ISO base-media container) so runs produce playable files
//! without an external encoder.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CocoError, Result};
use crate::img::{DepthMap, Image, Mask, VideoBundle};

pub fn frame_name(prefix: &str, index: usize) -> String {
    format!("{prefix}_{:04}.png", index + 1)
}

pub fn save_frames_png(dir: &Path, prefix: &str, frames: &[Image]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        f.save_png(&dir.join(frame_name(prefix, i)))?;
    }
    Ok(())
}

pub fn load_frames_png(dir: &Path, prefix: &str, count: usize) -> Result<Vec<Image>> {
    (0..count)
        .map(|i| Image::load_png(&dir.join(frame_name(prefix, i))))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    n: usize,
    height: usize,
    width: usize,
    has_masks: bool,
    has_depth: bool,
}

/// Persists a bundle as frames/, masks/, depth/ plus bundle.json.
pub fn save_bundle(dir: &Path, bundle: &VideoBundle) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (h, w) = (bundle.frames[0].height, bundle.frames[0].width);
    let meta = BundleMeta {
        n: bundle.len(),
        height: h,
        width: w,
        has_masks: bundle.masks.is_some(),
        has_depth: bundle.depth.is_some(),
    };
    std::fs::write(dir.join("bundle.json"), serde_json::to_string_pretty(&meta)?)?;
    save_frames_png(&dir.join("frames"), "frame", &bundle.frames)?;
    if let Some(masks) = &bundle.masks {
        let mdir = dir.join("masks");
        std::fs::create_dir_all(&mdir)?;
        for (i, m) in masks.iter().enumerate() {
            m.save_png(&mdir.join(frame_name("mask", i)))?;
        }
    }
    if let Some(depth) = &bundle.depth {
        let ddir = dir.join("depth");
        std::fs::create_dir_all(&ddir)?;
        for (i, d) in depth.iter().enumerate() {
            d.save_f32(&ddir.join(format!("depth_{:04}.f32", i + 1)))?;
        }
    }
    Ok(())
}

pub fn load_bundle(dir: &Path) -> Result<VideoBundle> {
    let meta: BundleMeta = serde_json::from_str(
        &std::fs::read_to_string(dir.join("bundle.json"))
            .map_err(|e| CocoError::Load(format!("{}: {e}", dir.display())))?,
    )?;
    let frames = load_frames_png(&dir.join("frames"), "frame", meta.n)?;
    let masks = if meta.has_masks {
        Some(
            (0..meta.n)
                .map(|i| Mask::load_png(&dir.join("masks").join(frame_name("mask", i))))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let depth = if meta.has_depth {
        Some(
            (0..meta.n)
                .map(|i| DepthMap::load_f32(&dir.join("depth").join(format!("depth_{:04}.f32", i + 1))))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let bundle = VideoBundle {
        frames,
        masks,
        depth,
    };
    bundle.check_aligned()?;
    Ok(bundle)
}

fn encode_jpeg(frame: &Image) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    let rgb: Vec<u8> = frame
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, 92);
    image::ImageEncoder::write_image(
        enc,
        &rgb,
        frame.width as u32,
        frame.height as u32,
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(buf)
}

struct BoxWriter {
    data: Vec<u8>,
}

impl BoxWriter {
    fn boxed(kind: &[u8; 4], build: impl FnOnce(&mut BoxWriter)) -> Vec<u8> {
        let mut inner = BoxWriter { data: Vec::new() };
        build(&mut inner);
        let mut out = Vec::with_capacity(inner.data.len() + 8);
        out.extend_from_slice(&((inner.data.len() + 8) as u32).to_be_bytes());
        out.extend_from_slice(kind);
        out.extend_from_slice(&inner.data);
        out
    }

    fn u16v(&mut self, v: u16) {
        self.data.extend_from_slice(&v.to_be_bytes());
    }
    fn u32v(&mut self, v: u32) {
        self.data.extend_from_slice(&v.to_be_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.data.extend_from_slice(b);
    }
    fn child(&mut self, kind: &[u8; 4], build: impl FnOnce(&mut BoxWriter)) {
        let b = BoxWriter::boxed(kind, build);
        self.data.extend_from_slice(&b);
    }
}

/// Writes Motion-JPEG samples into a minimal MP4 container. One video
/// track, constant frame duration, one chunk holding all samples.
pub fn write_mp4(path: &Path, frames: &[Image], fps: u32) -> Result<()> {
    if frames.is_empty() {
        return Err(CocoError::InvalidArgument("write_mp4: no frames".into()));
    }
    let (h, w) = (frames[0].height as u32, frames[0].width as u32);
    let samples: Vec<Vec<u8>> = frames.iter().map(encode_jpeg).collect::<Result<_>>()?;
    let sizes: Vec<u32> = samples.iter().map(|s| s.len() as u32).collect();

    let ftyp = BoxWriter::boxed(b"ftyp", |b| {
        b.bytes(b"isom");
        b.u32v(0x200);
        b.bytes(b"isommp41");
    });
    // mdat payload offset = ftyp + mdat header.
    let mdat_payload_start = (ftyp.len() + 8) as u32;
    let mdat = BoxWriter::boxed(b"mdat", |b| {
        for s in &samples {
            b.bytes(s);
        }
    });

    let timescale = 1000u32;
    let duration_per = timescale / fps.max(1);
    let total = duration_per * frames.len() as u32;
    let n = frames.len() as u32;

    let moov = BoxWriter::boxed(b"moov", |moov| {
        moov.child(b"mvhd", |b| {
            b.u32v(0); // version/flags
            b.u32v(0); // creation
            b.u32v(0); // modification
            b.u32v(timescale);
            b.u32v(total);
            b.u32v(0x0001_0000); // rate 1.0
            b.u16v(0x0100); // volume
            b.u16v(0);
            b.u32v(0);
            b.u32v(0);
            for v in [0x0001_0000u32, 0, 0, 0, 0x0001_0000, 0, 0, 0, 0x4000_0000] {
                b.u32v(v);
            }
            for _ in 0..6 {
                b.u32v(0);
            }
            b.u32v(2); // next track id
        });
        moov.child(b"trak", |trak| {
            trak.child(b"tkhd", |b| {
                b.u32v(7); // version 0, flags enabled+in-movie+in-preview
                b.u32v(0);
                b.u32v(0);
                b.u32v(1); // track id
                b.u32v(0);
                b.u32v(total);
                b.u32v(0);
                b.u32v(0);
                b.u32v(0); // layer + alternate group
                b.u32v(0); // volume + reserved
                for v in [0x0001_0000u32, 0, 0, 0, 0x0001_0000, 0, 0, 0, 0x4000_0000] {
                    b.u32v(v);
                }
                b.u32v(w << 16);
                b.u32v(h << 16);
            });
            trak.child(b"mdia", |mdia| {
                mdia.child(b"mdhd", |b| {
                    b.u32v(0);
                    b.u32v(0);
                    b.u32v(0);
                    b.u32v(timescale);
                    b.u32v(total);
                    b.u16v(0x55c4); // language "und"
                    b.u16v(0);
                });
                mdia.child(b"hdlr", |b| {
                    b.u32v(0);
                    b.u32v(0);
                    b.bytes(b"vide");
                    b.u32v(0);
                    b.u32v(0);
                    b.u32v(0);
                    b.bytes(b"VideoHandler\0");
                });
                mdia.child(b"minf", |minf| {
                    minf.child(b"vmhd", |b| {
                        b.u32v(1);
                        b.u32v(0);
                        b.u32v(0);
                    });
                    minf.child(b"dinf", |dinf| {
                        dinf.child(b"dref", |b| {
                            b.u32v(0);
                            b.u32v(1);
                            b.child(b"url ", |u| u.u32v(1)); // self-contained
                        });
                    });
                    minf.child(b"stbl", |stbl| {
                        stbl.child(b"stsd", |b| {
                            b.u32v(0);
                            b.u32v(1);
                            // Motion-JPEG sample entry.
                            b.child(b"jpeg", |e| {
                                e.bytes(&[0; 6]);
                                e.u16v(1); // data ref index
                                e.u32v(0);
                                e.u32v(0);
                                e.u32v(0);
                                e.u32v(0);
                                e.u16v(w as u16);
                                e.u16v(h as u16);
                                e.u32v(0x0048_0000); // 72 dpi
                                e.u32v(0x0048_0000);
                                e.u32v(0);
                                e.u16v(1); // frames per sample
                                e.bytes(&[0; 32]); // compressor name
                                e.u16v(24); // depth
                                e.u16v(0xFFFF);
                            });
                        });
                        stbl.child(b"stts", |b| {
                            b.u32v(0);
                            b.u32v(1);
                            b.u32v(n);
                            b.u32v(duration_per);
                        });
                        stbl.child(b"stsc", |b| {
                            b.u32v(0);
                            b.u32v(1);
                            b.u32v(1); // first chunk
                            b.u32v(n); // samples per chunk
                            b.u32v(1); // sample description
                        });
                        stbl.child(b"stsz", |b| {
                            b.u32v(0);
                            b.u32v(0); // non-uniform sizes
                            b.u32v(n);
                            for &s in &sizes {
                                b.u32v(s);
                            }
                        });
                        stbl.child(b"stco", |b| {
                            b.u32v(0);
                            b.u32v(1);
                            b.u32v(mdat_payload_start);
                        });
                    });
                });
            });
        });
    });

    let mut file = std::fs::File::create(path)?;
    file.write_all(&ftyp)?;
    file.write_all(&mdat)?;
    file.write_all(&moov)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gradient_frames(n: usize, res: usize) -> Vec<Image> {
        (0..n)
            .map(|t| {
                let mut img = Image::zeros(res, res);
                for r in 0..res {
                    for c in 0..res {
                        img.set_pixel(r, c, [
                            r as f64 / res as f64,
                            c as f64 / res as f64,
                            t as f64 / n as f64,
                        ]);
                    }
                }
                img
            })
            .collect()
    }

    #[test]
    fn png_sequence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let frames = gradient_frames(3, 16);
        save_frames_png(dir.path(), "frame", &frames).unwrap();
        let back = load_frames_png(dir.path(), "frame", 3).unwrap();
        for (a, b) in frames.iter().zip(&back) {
            // 8-bit quantization bound.
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn bundle_round_trip_with_masks_and_depth() {
        let dir = tempfile::tempdir().unwrap();
        let frames = gradient_frames(2, 8);
        let masks: Vec<Mask> = (0..2)
            .map(|t| Mask {
                height: 8,
                width: 8,
                data: (0..64).map(|i| (i + t) % 3 == 0).collect(),
            })
            .collect();
        let depth: Vec<DepthMap> = (0..2)
            .map(|t| DepthMap {
                height: 8,
                width: 8,
                values: (0..64).map(|i| 1.0 + i as f64 * 0.1 + t as f64).collect(),
                valid: vec![true; 64],
            })
            .collect();
        let bundle = VideoBundle {
            frames,
            masks: Some(masks.clone()),
            depth: Some(depth.clone()),
        };
        save_bundle(dir.path(), &bundle).unwrap();
        let back = load_bundle(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.masks.as_ref().unwrap()[1].data, masks[1].data);
        // Depth persists through f32.
        for (a, b) in depth[0].values.iter().zip(&back.depth.as_ref().unwrap()[0].values) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn mp4_has_container_structure() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.mp4");
        write_mp4(&path, &gradient_frames(4, 16), 8).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[4..8], b"ftyp");
        assert!(bytes.windows(4).any(|w| w == b"mdat"));
        assert!(bytes.windows(4).any(|w| w == b"moov"));
        assert!(bytes.windows(4).any(|w| w == b"jpeg"));
        // Deterministic output.
        let path2 = dir.path().join("clip2.mp4");
        write_mp4(&path2, &gradient_frames(4, 16), 8).unwrap();
        assert_eq!(bytes, std::fs::read(&path2).unwrap());
    }

    #[test]
    fn mp4_rejects_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_mp4(&dir.path().join("x.mp4"), &[], 8).is_err());
    }
}
