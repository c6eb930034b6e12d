//! Joint sensing, channel estimation and SCMA data detection for RIS-assisted links.

extern crate openblas_src;

mod error;
pub mod channel;
pub mod experiment;
pub mod linalg;
pub mod metrics;
pub mod multiue;
pub mod fixed_site;
pub mod operator;
pub mod sbl;
pub mod scma;
pub mod signal;
pub mod uamp;

pub use channel::{
    build_grids, sample_channels, sample_channels_on_grid, ChannelConfig, ChannelRealization, DictionaryGrids,
    GridSizes, PathAngles, Point3, RisConfig, SystemGeometry,
};
pub use error::{IsacError, Result};
pub use experiment::{run_experiment, ExperimentOutput, ResultRow, RunOptions, Scenario, SimulationConfig};
pub use linalg::{CMatrix, CVector, C64};
pub use metrics::{MetricsReport, Summary};
pub use operator::{BsGrid, ColumnTag, FixedSiteOperator, MultiUeOperator, SensingOperator, UeGrid};
pub use signal::{ReceivedBlock, RisSchedule, SuperimposedFrame};
