//! Scenario runner: victim construction, tampering grids, evaluation and
//! report export.

mod config;
mod scenario;
mod suite;

pub use config::{ScenarioConfig, SuspectRouterData, TamperSpec};
pub use scenario::{
    apply_tamper, build_victim, check_versions, compare_models, evaluate, generate_data, load_model, run_scenario,
    run_spec, ScenarioReport, ScenarioSummary, TaskData, Victim, Workbench, REPORT_FORMAT,
    REPORT_VERSION,
};
pub use suite::{
    run_suite, run_suite_on, write_report, write_suite, OutputFormat, SuiteId, SuiteOutput,
    EFFECTIVENESS_GRID, PARAMETRIC_GRID, SAMPLE_SIZES, SPARSITY_LEVELS, STRUCTURAL_COUNTS,
};
