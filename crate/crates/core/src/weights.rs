//! Little-endian binary weight files.
//!
//! ```text
//! "TGDW"  u32 version
//! u32 depth  u32 channels  u32 input_slices
//! u32 tag_len  tag bytes (UTF-8)
//! u32 n_layers
//! per layer: u32 n_out  u32 c_in  u8 has_bias  u8 has_bn  u8 relu  f32 momentum  f32 epsilon
//! per layer, in order: weights, bias?, gamma?, beta?, running_mean?, running_var?  (f32)
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Result, TgdError};
use crate::model::{ConvBlock, Network, NetworkConfig};
use crate::ops::{BatchNormParams, ConvParams};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"TGDW";
pub const FORMAT_VERSION: u32 = 1;

struct LayerHeader {
    n_out: usize,
    c_in: usize,
    has_bias: bool,
    has_bn: bool,
    relu: bool,
    momentum: f32,
    epsilon: f32,
}

pub fn to_bytes(net: &Network<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 4 * net.param_count() * 2);
    let put_u32 = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, net.config.depth);
    put_u32(&mut out, net.config.channels);
    put_u32(&mut out, net.config.input_slices);
    put_u32(&mut out, net.version_tag.len());
    out.extend_from_slice(net.version_tag.as_bytes());
    put_u32(&mut out, net.blocks.len());
    for b in &net.blocks {
        put_u32(&mut out, b.conv.out_channels());
        put_u32(&mut out, b.conv.in_channels());
        out.push(b.conv.bias.is_some() as u8);
        out.push(b.bn.is_some() as u8);
        out.push(b.relu as u8);
        let (m, e) = b.bn.as_ref().map_or((0.0, 0.0), |bn| (bn.momentum, bn.epsilon));
        out.extend_from_slice(&m.to_le_bytes());
        out.extend_from_slice(&e.to_le_bytes());
    }
    let put = |out: &mut Vec<u8>, t: &Tensor<f32>| {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    for b in &net.blocks {
        put(&mut out, &b.conv.weights);
        if let Some(bias) = &b.conv.bias {
            put(&mut out, bias);
        }
        if let Some(bn) = &b.bn {
            for t in [&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var] {
                put(&mut out, t);
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(TgdError::Truncated(format!(
                "needed {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn tensor(&mut self, shape: &[usize], what: &str) -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * 4, what)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(shape.to_vec(), data)
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Network<f32>> {
    let mut r = Reader { buf, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(TgdError::BadMagic { expected: MAGIC, found: magic });
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(TgdError::UnsupportedVersion { found: version, supported: FORMAT_VERSION });
    }
    let config = NetworkConfig {
        depth: r.u32("depth")? as usize,
        channels: r.u32("channels")? as usize,
        input_slices: r.u32("input_slices")? as usize,
    };
    let tag_len = r.u32("tag length")? as usize;
    let version_tag = String::from_utf8(r.take(tag_len, "version tag")?.to_vec())
        .map_err(|_| TgdError::InvalidArgument("version tag is not UTF-8".into()))?;
    let n_layers = r.u32("layer count")? as usize;
    if n_layers > 4096 {
        return Err(TgdError::InvalidArgument(format!("implausible layer count {n_layers}")));
    }
    let mut headers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let what = format!("layer {i} header");
        headers.push(LayerHeader {
            n_out: r.u32(&what)? as usize,
            c_in: r.u32(&what)? as usize,
            has_bias: r.u8(&what)? != 0,
            has_bn: r.u8(&what)? != 0,
            relu: r.u8(&what)? != 0,
            momentum: r.f32(&what)?,
            epsilon: r.f32(&what)?,
        });
    }
    let mut blocks = Vec::with_capacity(n_layers);
    for (i, h) in headers.iter().enumerate() {
        let what = format!("layer {i} data");
        if h.n_out == 0 || h.c_in == 0 {
            return Err(TgdError::LayerShape {
                layer: i,
                what: "conv weights",
                expected: "positive dimensions".into(),
                found: format!("[{}, {}, 3, 3]", h.n_out, h.c_in),
            });
        }
        let weights = r.tensor(&[h.n_out, h.c_in, 3, 3], &what)?;
        let bias = if h.has_bias { Some(r.tensor(&[h.n_out], &what)?) } else { None };
        let bn = if h.has_bn {
            Some(BatchNormParams {
                gamma: r.tensor(&[h.n_out], &what)?,
                beta: r.tensor(&[h.n_out], &what)?,
                running_mean: r.tensor(&[h.n_out], &what)?,
                running_var: r.tensor(&[h.n_out], &what)?,
                momentum: h.momentum,
                epsilon: h.epsilon,
            })
        } else {
            None
        };
        blocks.push(ConvBlock {
            conv: ConvParams::new(weights, bias)?,
            bn,
            relu: h.relu,
        });
    }
    if r.pos != buf.len() {
        return Err(TgdError::InvalidArgument(format!("{} trailing bytes after weights", buf.len() - r.pos)));
    }
    let net = Network { config, blocks, version_tag };
    net.validate()?;
    Ok(net)
}

/// Parses and checks every layer against the architecture `expected`
/// describes, naming the first layer that disagrees.
pub fn from_bytes_expect(buf: &[u8], expected: &NetworkConfig) -> Result<Network<f32>> {
    let net = from_bytes(buf)?;
    let d = expected.depth;
    for i in 0..net.blocks.len().max(d) {
        let want = (i < d).then(|| {
            let c_in = if i == 0 { expected.input_slices } else { expected.channels };
            let n_out = if i == d - 1 { 1 } else { expected.channels };
            [n_out, c_in, 3, 3]
        });
        let found = net.blocks.get(i).map(|b| b.conv.weights.shape().to_vec());
        if want.as_ref().map(|w| w.to_vec()) != found {
            return Err(TgdError::LayerShape {
                layer: i,
                what: "conv weights",
                expected: want.map_or("no layer".into(), |w| format!("{w:?}")),
                found: found.map_or("no layer".into(), |f| format!("{f:?}")),
            });
        }
    }
    Ok(net)
}

pub fn save_weights(net: &Network<f32>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(net))?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Network<f32>> {
    from_bytes(&std::fs::read(path)?)
}

pub fn load_weights_expect(path: impl AsRef<Path>, expected: &NetworkConfig) -> Result<Network<f32>> {
    from_bytes_expect(&std::fs::read(path)?, expected)
}

/// Hex SHA-256 of the serialized network.
pub fn network_hash(net: &Network<f32>) -> String {
    hex::encode(Sha256::digest(to_bytes(net)))
}
