//! Approximate nearest-neighbour search over fingerprints.
//!
//! [`IvfPqIndex`] partitions vectors with a coarse k-means quantizer and
//! stores product-quantized residuals in inverted lists. Scores are inner
//! products, which equal cosine similarity on the unit-norm fingerprints the
//! encoder produces. Raw vectors can be kept next to the codes so that the
//! best approximate candidates are re-scored exactly, and so that
//! [`exact_search`] can serve as a brute-force oracle.

mod ivfpq;
pub mod kmeans;

pub use ivfpq::{auto_nlist, exact_search, Hit, IvfPqConfig, IvfPqIndex, Location, INDEX_MAGIC};
