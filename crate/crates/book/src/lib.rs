//! Doc-test harness for the guide in `book/`.

#[doc = include_str!("../../../book/src/ch01-overview.md")]
mod chapter1 {}
#[doc = include_str!("../../../book/src/ch02-images.md")]
mod chapter2 {}
#[doc = include_str!("../../../book/src/ch03-datasets.md")]
mod chapter3 {}
#[doc = include_str!("../../../book/src/ch04-priors.md")]
mod chapter4 {}
#[doc = include_str!("../../../book/src/ch05-alignment.md")]
mod chapter5 {}
#[doc = include_str!("../../../book/src/ch06-backbones.md")]
mod chapter6 {}
#[doc = include_str!("../../../book/src/ch07-training.md")]
mod chapter7 {}
#[doc = include_str!("../../../book/src/ch08-metrics.md")]
mod chapter8 {}
#[doc = include_str!("../../../book/src/ch09-fidelity.md")]
mod chapter9 {}
#[doc = include_str!("../../../book/src/ch10-reports.md")]
mod chapter10 {}
