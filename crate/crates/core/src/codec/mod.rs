//! Entropy coding of the concatenated latent: quantization, a two-pass
//! checkerboard ("dual spatial") conditional entropy model, and a bit-exact
//! entropy coder over 16-bit quantized CDFs.

pub mod bitstream;
pub mod model;
pub mod range;

pub use bitstream::{pack_bitstream, unpack_bitstream, BitstreamHeader, HEADER_LEN, MAGIC, VERSION};
pub use model::{
    quantize, DualSpatialModel, LatentBundle, QuantizeMode, CONTEXT_HIDDEN, PREFIX, SCALE_FLOOR,
};
pub use range::{build_cdf, RangeDecoder, RangeEncoder, CDF_BITS, ESCAPE_SYM, NUM_SYMBOLS, SYM_MAX, SYM_MIN};
