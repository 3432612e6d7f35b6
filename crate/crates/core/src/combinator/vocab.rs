use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Reserved word for out-of-vocabulary tokens; always index 0 in word
/// vocabularies.
pub const UNK: &str = "<unk>";

/// Ordered symbol table. Insertion order defines indices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    items: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(items: Vec<String>) -> Self {
        let mut v = Vocab::default();
        for s in items {
            v.insert(&s);
        }
        v
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.items
    }
}

impl<S: AsRef<str>> FromIterator<S> for Vocab {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        let mut v = Vocab::default();
        for s in iter {
            v.insert(s.as_ref());
        }
        v
    }
}

impl Vocab {
    /// A word vocabulary: [`UNK`] first, then `words` in first-seen order.
    pub fn with_unk<S: AsRef<str>>(words: impl IntoIterator<Item = S>) -> Self {
        let mut v = Vocab::default();
        v.insert(UNK);
        for w in words {
            v.insert(w.as_ref());
        }
        v
    }

    /// Index of `s`, inserting it when new.
    pub fn insert(&mut self, s: &str) -> usize {
        if let Some(&i) = self.index.get(s) {
            return i;
        }
        self.items.push(s.to_string());
        self.index.insert(s.to_string(), self.items.len() - 1);
        self.items.len() - 1
    }

    pub fn get(&self, s: &str) -> Option<usize> {
        self.index.get(s).copied()
    }

    pub fn item(&self, i: usize) -> &str {
        &self.items[i]
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}
