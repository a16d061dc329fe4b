//! Core library for proactive human-robot collaboration: plan libraries,
//! open-end DTW plan recognition, intention estimation and planning.

pub mod alignment;
pub mod domain;
pub mod motion;
pub mod objects;
pub mod planner;
pub mod plans;
pub mod simulator;
pub mod trajectory;
