/*!
Salient object detection from clustered image regions and convolutional
map fusion.

The pipeline has three legs that meet in a small fusion network:

* a region leg: SLIC superpixels are grouped into a handful of coherent
  regions by agglomerative clustering on a k-nearest-neighbour graph, and
  a window-level network scores one context window per region,
* a pixel leg: a fully convolutional network produces a dense saliency
  map at input resolution,
* a fusion leg: a three-layer convolutional network combines the image
  with both maps into the final prediction.

Everything is implemented from scratch on a small NCHW tensor type that
is generic over `f32` (training) and `f64` (verification), so gradients
can be checked against central differences in double precision.

The [`harness`] module drives the batch workflow used by the `crpsd`
command line tool: dataset ingestion, training, prediction, and the
evaluation protocol (precision/recall curves, F-measures, mean absolute
error, a boundary-aware weighted F-measure, and shuffled AUC).
*/

pub mod error;
pub mod harness;
pub mod metrics;
pub mod nets;
pub mod nn;
pub mod raster;
pub mod region;
pub mod superpixel;

pub use error::{Error, Result};
