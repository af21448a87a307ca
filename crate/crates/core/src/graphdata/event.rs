use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One post in a propagation tree.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub post_id: String,
    pub parent_id: Option<String>,
    pub tokens: Vec<usize>,
}

impl Post {
    pub fn new(post_id: impl Into<String>, parent_id: Option<&str>, tokens: Vec<usize>) -> Self {
        Self {
            post_id: post_id.into(),
            parent_id: parent_id.map(str::to_owned),
            tokens,
        }
    }
}

/// Wire shape of one JSONL line.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct EventRecord {
    pub event_id: String,
    pub label: usize,
    pub posts: Vec<Post>,
}

/// A labelled reply tree. Node `v` is `posts[v]`; node 0 is the source.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PropagationEvent {
    event_id: String,
    label: usize,
    posts: Vec<Post>,
    parents: Vec<Option<usize>>,
}

impl PropagationEvent {
    /// Validates the reply structure: node 0 is the only root, every other
    /// parent resolves within the event, and all nodes reach the root.
    pub fn new(event_id: impl Into<String>, label: usize, posts: Vec<Post>) -> Result<Self> {
        let event_id = event_id.into();
        if posts.is_empty() {
            return Err(Error::Structure(format!("event {event_id} has no posts")));
        }
        let mut index = HashMap::with_capacity(posts.len());
        for (v, p) in posts.iter().enumerate() {
            if index.insert(p.post_id.as_str(), v).is_some() {
                return Err(Error::Structure(format!(
                    "duplicate post_id {:?}",
                    p.post_id
                )));
            }
            if p.tokens.is_empty() {
                return Err(Error::Structure(format!(
                    "post {:?} has no tokens",
                    p.post_id
                )));
            }
        }
        let mut parents = Vec::with_capacity(posts.len());
        for (v, p) in posts.iter().enumerate() {
            match (v, &p.parent_id) {
                (0, None) => parents.push(None),
                (0, Some(_)) => {
                    return Err(Error::Structure(format!(
                        "source post {:?} must not have a parent",
                        p.post_id
                    )))
                }
                (_, None) => {
                    return Err(Error::Structure(format!(
                        "post {:?} has no parent but is not the source",
                        p.post_id
                    )))
                }
                (_, Some(pid)) => match index.get(pid.as_str()) {
                    Some(&u) if u == v => {
                        return Err(Error::Structure(format!(
                            "post {:?} replies to itself",
                            p.post_id
                        )))
                    }
                    Some(&u) => parents.push(Some(u)),
                    None => {
                        return Err(Error::Structure(format!(
                            "post {:?} has dangling parent_id {pid:?}",
                            p.post_id
                        )))
                    }
                },
            }
        }
        // Every node must reach the root within |V| steps, otherwise it sits on a cycle.
        for start in 0..posts.len() {
            let mut v = start;
            let mut steps = 0;
            while let Some(u) = parents[v] {
                v = u;
                steps += 1;
                if steps > posts.len() {
                    return Err(Error::Structure(format!(
                        "cycle through post {:?}",
                        posts[start].post_id
                    )));
                }
            }
        }
        Ok(Self {
            event_id,
            label,
            posts,
            parents,
        })
    }

    pub fn event_id(&self) -> &str {
        &self.event_id
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn posts(&self) -> &[Post] {
        &self.posts
    }

    pub fn num_nodes(&self) -> usize {
        self.posts.len()
    }

    pub fn parent(&self, v: usize) -> Option<usize> {
        self.parents[v]
    }

    pub fn tokens(&self, v: usize) -> &[usize] {
        &self.posts[v].tokens
    }

    pub fn total_tokens(&self) -> usize {
        self.posts.iter().map(|p| p.tokens.len()).sum()
    }

    /// Reply edges as `(parent, child)` node pairs, in child order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.parents
            .iter()
            .enumerate()
            .filter_map(|(child, p)| p.map(|parent| (parent, child)))
            .collect()
    }

    /// Copy of this event with node `v`'s tokens replaced.
    pub fn with_tokens(&self, v: usize, tokens: Vec<usize>) -> Result<Self> {
        let mut posts = self.posts.clone();
        posts[v].tokens = tokens;
        Self::new(self.event_id.clone(), self.label, posts)
    }

    pub(crate) fn to_record(&self) -> EventRecord {
        EventRecord {
            event_id: self.event_id.clone(),
            label: self.label,
            posts: self.posts.clone(),
        }
    }

    pub(crate) fn from_record(rec: EventRecord) -> Result<Self> {
        Self::new(rec.event_id, rec.label, rec.posts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> Vec<Post> {
        vec![
            Post::new("a", None, vec![1]),
            Post::new("b", Some("a"), vec![2]),
            Post::new("c", Some("b"), vec![3]),
        ]
    }

    #[test]
    fn accepts_chain() {
        let e = PropagationEvent::new("e", 0, chain()).unwrap();
        assert_eq!(e.edges(), vec![(0, 1), (1, 2)]);
        assert_eq!(e.total_tokens(), 3);
    }

    #[test]
    fn children_may_precede_parents() {
        let posts = vec![
            Post::new("a", None, vec![1]),
            Post::new("c", Some("b"), vec![3]),
            Post::new("b", Some("a"), vec![2]),
        ];
        let e = PropagationEvent::new("e", 0, posts).unwrap();
        assert_eq!(e.parent(1), Some(2));
    }

    #[test]
    fn rejects_bad_structure() {
        let mut p = chain();
        p[2].parent_id = Some("zz".into());
        assert!(matches!(
            PropagationEvent::new("e", 0, p),
            Err(Error::Structure(_))
        ));

        let mut p = chain();
        p[1].parent_id = Some("c".into());
        let err = PropagationEvent::new("e", 0, p).unwrap_err();
        assert!(err.to_string().contains("cycle"), "{err}");

        let mut p = chain();
        p[0].parent_id = Some("b".into());
        assert!(PropagationEvent::new("e", 0, p).is_err());

        let mut p = chain();
        p[1].tokens.clear();
        assert!(PropagationEvent::new("e", 0, p).is_err());

        let mut p = chain();
        p[2].post_id = "a".into();
        assert!(PropagationEvent::new("e", 0, p).is_err());

        assert!(PropagationEvent::new("e", 0, vec![]).is_err());
    }
}
