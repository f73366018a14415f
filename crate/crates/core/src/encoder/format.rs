//! Little-endian model file: `MBDE`, version byte, architecture as `u32`
//! fields, then every parameter as `f64` in manifest order.

use std::io::{Read, Write};

use super::{CovarianceMode, EncoderArchitecture, EncoderModel};
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const MODEL_MAGIC: &[u8; 4] = b"MBDE";
pub const MODEL_VERSION: u8 = 1;

/// Upper bound on any architecture field, to reject garbage headers before
/// allocating.
const FIELD_LIMIT: u32 = 1 << 20;

pub fn write_model<T: Real, W: Write>(model: &EncoderModel<T>, mut out: W) -> Result<()> {
    let a = model.architecture();
    let u32_of = |v: usize| -> Result<[u8; 4]> {
        u32::try_from(v)
            .map(u32::to_le_bytes)
            .map_err(|_| Error::Config(format!("architecture field {v} exceeds 32 bits")))
    };
    out.write_all(MODEL_MAGIC)?;
    out.write_all(&[MODEL_VERSION])?;
    let mode = match a.covariance_mode {
        CovarianceMode::Diag => 0,
        CovarianceMode::Full => 1,
    };
    for v in [a.input_side, a.sources, mode, a.kernel, a.hidden, a.conv_channels.len()] {
        out.write_all(&u32_of(v)?)?;
    }
    for i in 0..a.conv_channels.len() {
        for v in [a.conv_channels[i], a.strides[i], a.paddings[i]] {
            out.write_all(&u32_of(v)?)?;
        }
    }
    let mut buf = Vec::with_capacity(8 * model.params().len());
    for p in model.params() {
        buf.extend_from_slice(&p.to_f64_lossy().to_le_bytes());
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn exact<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        let mut filled = 0;
        while filled < N {
            match self.inner.read(&mut b[filled..]) {
                Ok(0) => {
                    return Err(Error::Format {
                        what,
                        offset: self.offset + filled as u64,
                        detail: format!("unexpected end of file reading {what}"),
                    })
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += N as u64;
        Ok(b)
    }

    fn field(&mut self, what: &'static str) -> Result<usize> {
        let at = self.offset;
        let v = u32::from_le_bytes(self.exact::<4>(what)?);
        if v > FIELD_LIMIT {
            return Err(Error::Format {
                what,
                offset: at,
                detail: format!("{what} = {v} is implausibly large"),
            });
        }
        Ok(v as usize)
    }
}

pub fn read_model<T: Real, R: Read>(input: R) -> Result<EncoderModel<T>> {
    let mut r = Reader { inner: input, offset: 0 };
    let magic = r.exact::<4>("magic")?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format {
            what: "magic",
            offset: 0,
            detail: format!("expected MBDE, found {magic:?}"),
        });
    }
    let [version] = r.exact::<1>("version")?;
    if version != MODEL_VERSION {
        return Err(Error::Format {
            what: "version",
            offset: 4,
            detail: format!("unsupported model version {version}"),
        });
    }
    let input_side = r.field("input_side")?;
    let sources = r.field("sources")?;
    let mode_at = r.offset;
    let covariance_mode = match r.field("covariance_mode")? {
        0 => CovarianceMode::Diag,
        1 => CovarianceMode::Full,
        other => {
            return Err(Error::Format {
                what: "covariance_mode",
                offset: mode_at,
                detail: format!("unknown covariance mode {other}"),
            })
        }
    };
    let kernel = r.field("kernel")?;
    let hidden = r.field("hidden")?;
    let layers_at = r.offset;
    let layers = r.field("layer_count")?;
    if layers == 0 || layers > 64 {
        return Err(Error::Format {
            what: "layer_count",
            offset: layers_at,
            detail: format!("{layers} conv layers"),
        });
    }
    let (mut conv_channels, mut strides, mut paddings) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..layers {
        conv_channels.push(r.field("conv_channels")?);
        strides.push(r.field("stride")?);
        paddings.push(r.field("padding")?);
    }
    let architecture = EncoderArchitecture {
        input_side,
        sources,
        covariance_mode,
        conv_channels,
        kernel,
        strides,
        paddings,
        hidden,
    };
    let header_end = r.offset;
    architecture.validate().map_err(|e| Error::Format {
        what: "architecture",
        offset: header_end,
        detail: e.to_string(),
    })?;
    let count = architecture.parameter_count();
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        params.push(T::lit(f64::from_le_bytes(r.exact::<8>("parameters")?)));
    }
    let mut extra = [0u8; 1];
    if r.inner.read(&mut extra)? != 0 {
        return Err(Error::Format {
            what: "trailer",
            offset: r.offset,
            detail: "trailing bytes after parameters".into(),
        });
    }
    EncoderModel::from_params(architecture, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_params;
    use crate::rng::init_stream;

    fn model() -> EncoderModel<f64> {
        let a = EncoderArchitecture::with_channels(9, 3, CovarianceMode::Full, [2, 3, 4, 5], 7);
        init_params(&a, &mut init_stream(5)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"MBDE");
        assert_eq!(buf[4], MODEL_VERSION);
        let header = 5 + 4 * (6 + 3 * 4);
        assert_eq!(buf.len(), header + 8 * m.architecture().parameter_count());
        let back: EncoderModel<f64> = read_model(buf.as_slice()).unwrap();
        assert_eq!(back.architecture(), m.architecture());
        for (a, b) in back.params().iter().zip(m.params()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let mut buf = Vec::new();
        write_model(&model(), &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        match read_model::<f64, _>(buf.as_slice()) {
            Err(Error::Format { what, offset, .. }) => {
                assert_eq!(what, "parameters");
                assert_eq!(offset, buf.len() as u64);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corrupt_headers_rejected() {
        let mut buf = Vec::new();
        write_model(&model(), &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_model::<f64, _>(bad.as_slice()), Err(Error::Format { what: "magic", .. })));
        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(matches!(read_model::<f64, _>(bad.as_slice()), Err(Error::Format { what: "version", .. })));
        let mut bad = buf.clone();
        bad[13] = 7;
        assert!(matches!(
            read_model::<f64, _>(bad.as_slice()),
            Err(Error::Format { what: "covariance_mode", offset: 13, .. })
        ));
        let mut bad = buf;
        bad.push(0);
        assert!(matches!(read_model::<f64, _>(bad.as_slice()), Err(Error::Format { what: "trailer", .. })));
    }
}
