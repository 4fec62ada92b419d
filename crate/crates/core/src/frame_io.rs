//! Uncompressed 8-bit 4:2:0 video: Y4M streams and headerless planar `.yuv`.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

const Y4M_MAGIC: &str = "YUV4MPEG2";
const FRAME_MAGIC: &[u8] = b"FRAME";
const MAX_HEADER_LEN: usize = 4096;

#[derive(Debug, Error)]
pub enum FrameIoError {
    #[error("malformed Y4M header: {0}")]
    MalformedHeader(String),
    #[error("unsupported colorspace `{0}` (only 8-bit 4:2:0 is accepted)")]
    UnsupportedColorspace(String),
    #[error("truncated frame: expected {expected} payload bytes, got {got}")]
    TruncatedFrame { expected: usize, got: usize },
    #[error("malformed FRAME marker")]
    MalformedFrameMarker,
    #[error("geometry mismatch: expected {expected_w}x{expected_h}, got {got_w}x{got_h}")]
    GeometryMismatch {
        expected_w: usize,
        expected_h: usize,
        got_w: usize,
        got_h: usize,
    },
    #[error("invalid geometry {0}x{1}: both sides must be at least 2")]
    InvalidGeometry(usize, usize),
    #[error("plane `{plane}` has {got} samples, expected {expected}")]
    PlaneSize {
        plane: &'static str,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, FrameIoError>;

/// Chroma plane extent for a luma extent under 4:2:0 subsampling.
#[inline]
pub fn chroma_dim(luma: usize) -> usize {
    luma.div_ceil(2)
}

/// Bytes in one 8-bit 4:2:0 frame payload.
pub fn frame_payload_len(width: usize, height: usize) -> usize {
    width * height + 2 * chroma_dim(width) * chroma_dim(height)
}

/// One 8-bit YCbCr 4:2:0 picture. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame420 {
    width: usize,
    height: usize,
    y: Vec<u8>,
    cb: Vec<u8>,
    cr: Vec<u8>,
}

impl Frame420 {
    pub fn new(width: usize, height: usize, y: Vec<u8>, cb: Vec<u8>, cr: Vec<u8>) -> Result<Self> {
        if width < 2 || height < 2 {
            return Err(FrameIoError::InvalidGeometry(width, height));
        }
        let luma = width * height;
        let chroma = chroma_dim(width) * chroma_dim(height);
        for (plane, got, expected) in [
            ("y", y.len(), luma),
            ("cb", cb.len(), chroma),
            ("cr", cr.len(), chroma),
        ] {
            if got != expected {
                return Err(FrameIoError::PlaneSize {
                    plane,
                    expected,
                    got,
                });
            }
        }
        Ok(Self {
            width,
            height,
            y,
            cb,
            cr,
        })
    }

    /// Frame with every sample of each plane set to the given value.
    pub fn filled(width: usize, height: usize, y: u8, cb: u8, cr: u8) -> Result<Self> {
        let chroma = chroma_dim(width) * chroma_dim(height);
        Self::new(
            width,
            height,
            vec![y; width * height],
            vec![cb; chroma],
            vec![cr; chroma],
        )
    }

    /// Splits a contiguous Y, Cb, Cr payload.
    pub fn from_payload(width: usize, height: usize, payload: &[u8]) -> Result<Self> {
        let expected = frame_payload_len(width, height);
        if payload.len() != expected {
            return Err(FrameIoError::TruncatedFrame {
                expected,
                got: payload.len(),
            });
        }
        let luma = width * height;
        let chroma = chroma_dim(width) * chroma_dim(height);
        Self::new(
            width,
            height,
            payload[..luma].to_vec(),
            payload[luma..luma + chroma].to_vec(),
            payload[luma + chroma..].to_vec(),
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn chroma_width(&self) -> usize {
        chroma_dim(self.width)
    }

    pub fn chroma_height(&self) -> usize {
        chroma_dim(self.height)
    }

    pub fn y(&self) -> &[u8] {
        &self.y
    }

    pub fn cb(&self) -> &[u8] {
        &self.cb
    }

    pub fn cr(&self) -> &[u8] {
        &self.cr
    }

    pub fn payload_len(&self) -> usize {
        frame_payload_len(self.width, self.height)
    }

    fn write_payload<W: Write>(&self, sink: &mut W) -> io::Result<()> {
        sink.write_all(&self.y)?;
        sink.write_all(&self.cb)?;
        sink.write_all(&self.cr)
    }
}

/// Geometry and timing of a clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipHeader {
    pub width: usize,
    pub height: usize,
    pub fps_num: u32,
    pub fps_den: u32,
    /// Unknown for streams; filled in when a whole clip has been read.
    pub frame_count: Option<usize>,
}

impl ClipHeader {
    pub fn new(width: usize, height: usize, fps_num: u32, fps_den: u32) -> Self {
        Self {
            width,
            height,
            fps_num,
            fps_den,
            frame_count: None,
        }
    }

    pub fn fps(&self) -> f64 {
        f64::from(self.fps_num) / f64::from(self.fps_den)
    }

    pub fn frame_payload_len(&self) -> usize {
        frame_payload_len(self.width, self.height)
    }

    fn check_frame(&self, frame: &Frame420) -> Result<()> {
        if frame.width != self.width || frame.height != self.height {
            return Err(FrameIoError::GeometryMismatch {
                expected_w: self.width,
                expected_h: self.height,
                got_w: frame.width,
                got_h: frame.height,
            });
        }
        Ok(())
    }
}

fn read_line_limited<R: BufRead>(reader: &mut R, limit: usize) -> io::Result<Vec<u8>> {
    let mut line = Vec::new();
    reader.take(limit as u64).read_until(b'\n', &mut line)?;
    Ok(line)
}

fn parse_fps(tag: &str) -> Option<(u32, u32)> {
    let (num, den) = tag.split_once(':')?;
    let num: u32 = num.parse().ok()?;
    let den: u32 = den.parse().ok()?;
    (num > 0 && den > 0).then_some((num, den))
}

fn check_colorspace(tag: &str) -> Result<()> {
    match tag {
        "420" | "420jpeg" | "420paldv" | "420mpeg2" => Ok(()),
        other => Err(FrameIoError::UnsupportedColorspace(other.to_string())),
    }
}

/// Reads the stream header, leaving the reader at the first `FRAME` marker.
pub fn parse_y4m_header<R: BufRead>(reader: &mut R) -> Result<ClipHeader> {
    let line = read_line_limited(reader, MAX_HEADER_LEN)?;
    if line.last() != Some(&b'\n') {
        return Err(FrameIoError::MalformedHeader(
            "header line is not newline-terminated".into(),
        ));
    }
    let text = std::str::from_utf8(&line[..line.len() - 1])
        .map_err(|_| FrameIoError::MalformedHeader("header is not ASCII".into()))?;
    let mut tokens = text.split(' ').filter(|t| !t.is_empty());
    if tokens.next() != Some(Y4M_MAGIC) {
        return Err(FrameIoError::MalformedHeader("missing YUV4MPEG2 magic".into()));
    }

    let (mut width, mut height, mut fps) = (None, None, None);
    for token in tokens {
        let (tag, value) = token.split_at(1);
        match tag {
            "W" => width = value.parse::<usize>().ok(),
            "H" => height = value.parse::<usize>().ok(),
            "F" => {
                fps = Some(parse_fps(value).ok_or_else(|| {
                    FrameIoError::MalformedHeader(format!("bad frame rate `{value}`"))
                })?)
            }
            "C" => check_colorspace(value)?,
            // I (interlace), A (aspect), X (comment) carry nothing we use.
            _ => {}
        }
    }
    let width = width.ok_or_else(|| FrameIoError::MalformedHeader("missing W tag".into()))?;
    let height = height.ok_or_else(|| FrameIoError::MalformedHeader("missing H tag".into()))?;
    if width < 2 || height < 2 {
        return Err(FrameIoError::InvalidGeometry(width, height));
    }
    // Y4M leaves F optional in practice; 25 fps is the common muxer default.
    let (fps_num, fps_den) = fps.unwrap_or((25, 1));
    Ok(ClipHeader::new(width, height, fps_num, fps_den))
}

/// Reads one frame, or `None` at a clean end of stream.
pub fn read_next_frame<R: BufRead>(reader: &mut R, header: &ClipHeader) -> Result<Option<Frame420>> {
    let marker = read_line_limited(reader, MAX_HEADER_LEN)?;
    if marker.is_empty() {
        return Ok(None);
    }
    let well_formed = marker.starts_with(FRAME_MAGIC)
        && marker.last() == Some(&b'\n')
        && matches!(marker.get(FRAME_MAGIC.len()), Some(b'\n') | Some(b' '));
    if !well_formed {
        return Err(FrameIoError::MalformedFrameMarker);
    }

    let expected = header.frame_payload_len();
    let mut payload = Vec::with_capacity(expected);
    reader.take(expected as u64).read_to_end(&mut payload)?;
    if payload.len() != expected {
        return Err(FrameIoError::TruncatedFrame {
            expected,
            got: payload.len(),
        });
    }
    Frame420::from_payload(header.width, header.height, &payload).map(Some)
}

/// Streaming Y4M reader.
pub struct Y4mReader<R> {
    inner: R,
    header: ClipHeader,
}

impl<R: BufRead> Y4mReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let header = parse_y4m_header(&mut inner)?;
        Ok(Self { inner, header })
    }

    pub fn header(&self) -> &ClipHeader {
        &self.header
    }

    pub fn next_frame(&mut self) -> Result<Option<Frame420>> {
        read_next_frame(&mut self.inner, &self.header)
    }
}

impl<R: BufRead> Iterator for Y4mReader<R> {
    type Item = Result<Frame420>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_frame().transpose()
    }
}

fn write_y4m_header<W: Write>(header: &ClipHeader, sink: &mut W) -> io::Result<usize> {
    let line = format!(
        "{Y4M_MAGIC} W{} H{} F{}:{} Ip A1:1 C420jpeg\n",
        header.width, header.height, header.fps_num, header.fps_den
    );
    sink.write_all(line.as_bytes())?;
    Ok(line.len())
}

/// Writes a whole clip as Y4M and returns the number of bytes emitted.
pub fn write_clip<'a, I, W>(frames: I, header: &ClipHeader, sink: &mut W) -> Result<usize>
where
    I: IntoIterator<Item = &'a Frame420>,
    W: Write,
{
    let mut written = write_y4m_header(header, sink)?;
    for frame in frames {
        header.check_frame(frame)?;
        sink.write_all(b"FRAME\n")?;
        frame.write_payload(sink)?;
        written += FRAME_MAGIC.len() + 1 + frame.payload_len();
    }
    sink.flush()?;
    Ok(written)
}

/// Reads every frame of a Y4M stream; the returned header carries the frame count.
pub fn read_clip<R: BufRead>(reader: R) -> Result<(ClipHeader, Vec<Frame420>)> {
    let mut reader = Y4mReader::new(reader)?;
    let mut frames = Vec::new();
    while let Some(frame) = reader.next_frame()? {
        frames.push(frame);
    }
    let mut header = *reader.header();
    header.frame_count = Some(frames.len());
    Ok((header, frames))
}

pub fn read_y4m_file(path: &Path) -> Result<(ClipHeader, Vec<Frame420>)> {
    read_clip(BufReader::new(File::open(path)?))
}

pub fn write_y4m_file(path: &Path, header: &ClipHeader, frames: &[Frame420]) -> Result<usize> {
    let mut sink = BufWriter::new(File::create(path)?);
    write_clip(frames, header, &mut sink)
}

/// Reads headerless planar 4:2:0 frames of a caller-supplied geometry.
pub fn read_raw_yuv<R: Read>(mut reader: R, width: usize, height: usize) -> Result<Vec<Frame420>> {
    if width < 2 || height < 2 {
        return Err(FrameIoError::InvalidGeometry(width, height));
    }
    let frame_len = frame_payload_len(width, height);
    let mut frames = Vec::new();
    loop {
        let mut payload = Vec::with_capacity(frame_len);
        (&mut reader).take(frame_len as u64).read_to_end(&mut payload)?;
        match payload.len() {
            0 => return Ok(frames),
            n if n == frame_len => frames.push(Frame420::from_payload(width, height, &payload)?),
            got => {
                return Err(FrameIoError::TruncatedFrame {
                    expected: frame_len,
                    got,
                })
            }
        }
    }
}

pub fn write_raw_yuv<W: Write>(frames: &[Frame420], sink: &mut W) -> Result<usize> {
    let mut written = 0;
    for frame in frames {
        frame.write_payload(sink)?;
        written += frame.payload_len();
    }
    sink.flush()?;
    Ok(written)
}

/// Parses `WxH` as used by `--size`.
pub fn parse_size(text: &str) -> Option<(usize, usize)> {
    let (w, h) = text.split_once(['x', 'X'])?;
    Some((w.trim().parse().ok()?, h.trim().parse().ok()?))
}

/// Parses `N` or `N:D` as used by `--fps`.
pub fn parse_fps_arg(text: &str) -> Option<(u32, u32)> {
    match text.split_once(':') {
        Some(_) => parse_fps(text),
        None => text.parse::<u32>().ok().filter(|&n| n > 0).map(|n| (n, 1)),
    }
}
