//! `Volume` and the MVTTVOL1 file format.
//!
//! ```text
//! header      one line of compact UTF-8 JSON terminated by '\n':
//!             {"magic":"MVTTVOL1","extents":[nx,ny,nz],"spacing":[sx,sy,sz],
//!              "la_pv":bool,"scar":bool}
//! intensities nx·ny·nz f64 little-endian, x fastest, then y, then z
//! la_pv       ceil(nx·ny·nz / 8) bytes if present, bit i of the mask is
//!             bit (i % 8) of byte i / 8 (LSB first), unused bits zero
//! scar        same packing, if present
//! ```

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Mask;
use crate::error::{Error, FormatError, Result};

pub const VOLUME_MAGIC: &str = "MVTTVOL1";

/// Longest header line accepted before the payload starts.
pub const MAX_HEADER_BYTES: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    extents: (usize, usize, usize),
    spacing: [f64; 3],
    intensities: Vec<f64>,
    la_pv: Option<Mask>,
    scar: Option<Mask>,
}

/// The decoded header line of a volume file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub magic: String,
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    pub la_pv: bool,
    pub scar: bool,
}

impl VolumeHeader {
    pub fn voxels(&self) -> usize {
        self.extents.iter().product()
    }

    /// Byte count of everything after the header line.
    pub fn payload_bytes(&self) -> usize {
        let n = self.voxels();
        let mask = n.div_ceil(8);
        8 * n + mask * (usize::from(self.la_pv) + usize::from(self.scar))
    }

    fn validate(&self) -> Result<(), FormatError> {
        if self.magic != VOLUME_MAGIC {
            return Err(FormatError::BadMagic {
                expected: VOLUME_MAGIC.into(),
                found: self.magic.clone(),
            });
        }
        if self.extents.contains(&0) {
            return Err(FormatError::MalformedHeader(format!("zero extent in {:?}", self.extents)));
        }
        // keep the payload size representable
        let fits = self
            .extents
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(9))
            .is_some_and(|b| b <= isize::MAX as usize);
        if !fits {
            return Err(FormatError::MalformedHeader(format!("extents {:?} too large", self.extents)));
        }
        if self.spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(FormatError::MalformedHeader(format!(
                "spacing must be finite and positive, got {:?}",
                self.spacing
            )));
        }
        Ok(())
    }

    /// Parses the header line (without its terminating newline).
    pub fn parse(line: &[u8]) -> Result<Self, FormatError> {
        let header: VolumeHeader =
            serde_json::from_slice(line).map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
        header.validate()?;
        Ok(header)
    }
}

impl Volume {
    pub fn new(extents: (usize, usize, usize), spacing: [f64; 3], intensities: Vec<f64>) -> Result<Self> {
        let (nx, ny, nz) = extents;
        if nx == 0 || ny == 0 || nz == 0 {
            return Err(Error::invalid("Volume::new", format!("zero extent in {extents:?}")));
        }
        if nx * ny * nz != intensities.len() {
            return Err(Error::shape(
                "Volume::new",
                format!("extents {extents:?} need {} voxels, got {}", nx * ny * nz, intensities.len()),
            ));
        }
        if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::invalid("Volume::new", format!("spacing {spacing:?} must be finite and positive")));
        }
        if let Some(i) = intensities.iter().position(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid(
                "Volume::new",
                format!("intensity {} at voxel {i} is not finite and non-negative", intensities[i]),
            ));
        }
        Ok(Volume {
            extents,
            spacing,
            intensities,
            la_pv: None,
            scar: None,
        })
    }

    pub fn with_la_pv(mut self, mask: Mask) -> Result<Self> {
        self.check_extents(&mask)?;
        self.la_pv = Some(mask);
        Ok(self)
    }

    pub fn with_scar(mut self, mask: Mask) -> Result<Self> {
        self.check_extents(&mask)?;
        self.scar = Some(mask);
        Ok(self)
    }

    fn check_extents(&self, mask: &Mask) -> Result<()> {
        if mask.extents() != self.extents {
            return Err(Error::shape(
                "Volume",
                format!("mask extents {:?} vs volume {:?}", mask.extents(), self.extents),
            ));
        }
        Ok(())
    }

    /// `(nx, ny, nz)`.
    pub fn extents(&self) -> (usize, usize, usize) {
        self.extents
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> usize {
        self.intensities.len()
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    pub fn la_pv(&self) -> Option<&Mask> {
        self.la_pv.as_ref()
    }

    pub fn scar(&self) -> Option<&Mask> {
        self.scar.as_ref()
    }

    /// Copy without masks, as a model would see it.
    pub fn without_masks(&self) -> Volume {
        Volume {
            la_pv: None,
            scar: None,
            ..self.clone()
        }
    }

    /// Checks that the scar mask sits inside the boundary shell of radius
    /// `wall_radius` around the LA/PV mask.
    pub fn check_scar_on_wall(&self, wall_radius: f64) -> Result<()> {
        let (Some(la), Some(scar)) = (&self.la_pv, &self.scar) else {
            return Ok(());
        };
        let shell = la.boundary_shell(wall_radius);
        if let Some(i) = scar.data().iter().zip(shell.data()).position(|(&s, &w)| s && !w) {
            return Err(Error::invalid(
                "Volume",
                format!("scar voxel {:?} lies off the wall shell", scar.coords(i)),
            ));
        }
        Ok(())
    }

    pub fn header(&self) -> VolumeHeader {
        VolumeHeader {
            magic: VOLUME_MAGIC.into(),
            extents: [self.extents.0, self.extents.1, self.extents.2],
            spacing: self.spacing,
            la_pv: self.la_pv.is_some(),
            scar: self.scar.is_some(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header();
        let mut out = serde_json::to_vec(&header).expect("header serialises");
        out.push(b'\n');
        out.reserve(header.payload_bytes());
        for v in &self.intensities {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for mask in [&self.la_pv, &self.scar].into_iter().flatten() {
            out.extend(pack_bits(mask.data()));
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let nl = bytes
            .iter()
            .take(MAX_HEADER_BYTES + 1)
            .position(|&b| b == b'\n')
            .ok_or_else(|| {
                FormatError::MalformedHeader(format!("no header line terminator within {MAX_HEADER_BYTES} bytes"))
            })?;
        let header = VolumeHeader::parse(&bytes[..nl])?;
        let payload = &bytes[nl + 1..];
        let expected = header.payload_bytes();
        if payload.len() < expected {
            return Err(FormatError::Truncated {
                section: "volume payload",
                expected,
                actual: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(FormatError::SizeMismatch {
                section: "volume payload",
                expected,
                actual: payload.len(),
            });
        }
        let n = header.voxels();
        let (ints, mut rest) = payload.split_at(8 * n);
        let intensities: Vec<f64> = ints
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let extents = (header.extents[0], header.extents[1], header.extents[2]);
        let mut volume =
            Volume::new(extents, header.spacing, intensities).map_err(|e| FormatError::InvalidPayload(e.to_string()))?;
        let mask_len = n.div_ceil(8);
        for (present, name) in [(header.la_pv, "la_pv"), (header.scar, "scar")] {
            if !present {
                continue;
            }
            let (packed, tail) = rest.split_at(mask_len);
            rest = tail;
            let bits = unpack_bits(packed, n)
                .ok_or_else(|| FormatError::InvalidPayload(format!("{name} mask has nonzero padding bits")))?;
            let mask = Mask::new(extents, bits).expect("length checked");
            if name == "la_pv" {
                volume.la_pv = Some(mask);
            } else {
                volume.scar = Some(mask);
            }
        }
        Ok(volume)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io_util::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

/// Reads only the header line of a volume file.
pub fn read_header(path: &Path) -> Result<VolumeHeader> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut line = Vec::new();
    BufReader::new(f)
        .take(MAX_HEADER_BYTES as u64 + 1)
        .read_until(b'\n', &mut line)
        .map_err(|e| Error::io(path, e))?;
    if line.pop() != Some(b'\n') {
        return Err(FormatError::MalformedHeader(format!("no header line terminator within {MAX_HEADER_BYTES} bytes")).into());
    }
    Ok(VolumeHeader::parse(&line)?)
}

pub(crate) fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

/// `None` if any bit past `n` is set.
pub(crate) fn unpack_bits(bytes: &[u8], n: usize) -> Option<Vec<bool>> {
    let bits: Vec<bool> = (0..bytes.len() * 8).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect();
    if bits[n..].iter().any(|&b| b) {
        return None;
    }
    Some(bits[..n].to_vec())
}
