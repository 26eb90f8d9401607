//! Toy Chinese grammar for offline corpora.
//!
//! Most words mean what their characters suggest (学校, 图书馆); a few do
//! not (小心, 东西, 马上), so word and character views of a sentence carry
//! different information.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::{seeded_rng, Rng};

const TIMES: &[&str] = &["今天", "明天", "昨天", "早上", "晚上", "周末"];
const SUBJECTS: &[&str] = &["老师", "学生", "妈妈", "朋友", "我们", "他们", "医生", "孩子"];
const ADVERBS: &[&str] = &["非常", "常常", "已经", "一起"];
const VERBS: &[&str] = &["喜欢", "学习", "参观", "购买", "准备", "打扫"];
const OBJECTS: &[&str] = &["苹果", "音乐", "电脑", "作业", "房间", "自行车", "图书馆", "博物馆"];
const PLACES: &[&str] = &["学校", "公园", "商店", "厨房", "医院"];
const FEELINGS: &[&str] = &["开心", "高兴", "紧张"];

/// Marker words that decide the class in [`labeled_sentences`].
pub const MARKERS: [&str; 4] = ["苹果", "音乐", "电脑", "作业"];

fn pick<'a>(rng: &mut Rng, words: &[&'a str]) -> &'a str {
    words.choose(rng).copied().unwrap_or("")
}

/// One sentence ending in 。.
pub fn sentence(rng: &mut Rng) -> String {
    sentence_with_object(rng, None)
}

fn sentence_with_object(rng: &mut Rng, object: Option<&str>) -> String {
    let s = pick(rng, SUBJECTS);
    let o = object.unwrap_or_else(|| pick(rng, OBJECTS));
    match rng.gen_range(0..6) {
        0 => format!("{}{}在{}{}{}。", pick(rng, TIMES), s, pick(rng, PLACES), pick(rng, VERBS), o),
        1 => format!("{}{}{}{}。", s, pick(rng, ADVERBS), pick(rng, VERBS), o),
        2 => format!("{}说路上要小心{}。", s, o),
        3 => format!("{}在{}买了很多东西和{}。", s, pick(rng, PLACES), o),
        4 => format!("{}马上去{}{}{}。", s, pick(rng, PLACES), pick(rng, VERBS), o),
        _ => format!("{}{}很{}地{}{}。", pick(rng, TIMES), s, pick(rng, FEELINGS), pick(rng, VERBS), o),
    }
}

/// `n` lines of two to four sentences each.
pub fn corpus(n: usize, seed: u64) -> Vec<String> {
    let mut rng = seeded_rng(seed);
    (0..n)
        .map(|_| {
            let k = rng.gen_range(2..=4);
            (0..k).map(|_| sentence(&mut rng)).collect()
        })
        .collect()
}

/// Sentences labeled by the marker word they contain (classes
/// `0..n_classes`, cycling so the set is balanced).
pub fn labeled_sentences(n: usize, n_classes: usize, seed: u64) -> Vec<(String, usize)> {
    let n_classes = n_classes.clamp(1, MARKERS.len());
    let mut rng = seeded_rng(seed);
    (0..n)
        .map(|i| {
            let class = i % n_classes;
            (sentence_with_object(&mut rng, Some(MARKERS[class])), class)
        })
        .collect()
}
