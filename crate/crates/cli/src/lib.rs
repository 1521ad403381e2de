//! File formats, persistence and experiment drivers behind the `nmix`
//! command-line tool.

pub mod cv;
pub mod error;
pub mod io;
pub mod model_file;

pub use cv::{run_cv, run_cv_files, CvOptions, CvRow, Method};
pub use error::{CliError, Result};
pub use io::{load_count_table, load_counts, load_features, load_matrix, write_atomic, CountTable};
pub use model_file::ModelFile;
