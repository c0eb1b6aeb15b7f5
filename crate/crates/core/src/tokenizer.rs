use crate::codebook::{dequantize, quantize, Codebook, LatentGrid, TokenGrid};
use crate::error::Result;
use crate::image::Image;

/// Encoder, codebook and decoder of a discrete image tokenizer.
///
/// Implementations must be deterministic; the evaluation protocols rely on
/// re-encoding the same image yielding the same tokens.
pub trait Tokenizer: Sync {
    fn codebook(&self) -> &Codebook;

    fn encode(&self, image: &Image) -> Result<LatentGrid>;

    fn decode_latents(&self, latents: &LatentGrid) -> Result<Image>;

    fn tokenize(&self, image: &Image) -> Result<TokenGrid> {
        quantize(&self.encode(image)?, self.codebook())
    }

    fn detokenize(&self, tokens: &TokenGrid) -> Result<Image> {
        self.decode_latents(&dequantize(tokens, self.codebook())?)
    }

    /// Clean reconstruction `decode(quantize(encode(image)))`.
    fn reconstruct(&self, image: &Image) -> Result<Image> {
        self.detokenize(&self.tokenize(image)?)
    }
}
