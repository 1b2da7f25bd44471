// SPDX-License-Identifier: MIT OR Apache-2.0

pub mod chess;
pub mod cli;
pub mod corruption;
pub mod fixtures;
pub mod interventions;
pub mod model;
pub mod parallel;
pub mod probing;
pub mod puzzle;
pub mod report;
pub mod selftest;
pub mod setlabel;
