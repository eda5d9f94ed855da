//! Synthetic listing-market measurement toolkit: a ground-truth market
//! generator, a crawler-fleet simulator, and the statistical pipeline that
//! turns crawl observations into sales and revenue estimates.

pub mod catalog;
pub mod crawl;
pub mod dataset;
pub mod geo;
pub mod glmm;
pub mod market;
pub mod mfa;
pub mod pipeline;
pub mod profile;
pub mod reconstruct;
pub mod report;
pub mod stats;
pub mod util;
