//! Newline-delimited event log.
//!
//! One JSON object per line: `{"t":..,"worker":..,"action":..,"ids":[..],"value":..}`.
//! Actions and their payloads:
//!
//! | action          | ids                     | value                  |
//! |-----------------|-------------------------|------------------------|
//! | `compute_start` | devices                 | duration               |
//! | `compute_end`   | devices                 | -                      |
//! | `push`          | trajectory id           | min producing version  |
//! | `pop`           | trajectory id           | pipe depth after pop   |
//! | `collect`       | trajectory ids of batch | actor version          |
//! | `publish`       | -                       | new version            |
//! | `submit`        | request id              | batcher                |
//! | `dispatch`      | request ids of batch    | batcher                |
//! | `respond`       | request ids             | served version         |

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub t: f64,
    pub worker: String,
    pub action: String,
    #[serde(default)]
    pub ids: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    pub records: Vec<LogRecord>,
}

impl EventLog {
    pub fn push(&mut self, t: f64, worker: &str, action: &str, ids: Vec<u64>, value: Option<f64>) {
        self.records.push(LogRecord {
            t,
            worker: worker.to_string(),
            action: action.to_string(),
            ids,
            value,
        });
    }

    pub fn write_ndjson<W: Write>(&self, mut w: W) -> io::Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_ndjson(&self) -> String {
        let mut buf = Vec::new();
        self.write_ndjson(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    pub fn read_ndjson<R: BufRead>(r: R) -> io::Result<Self> {
        let mut records = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line).map_err(io::Error::other)?);
        }
        Ok(Self { records })
    }

    pub fn of_action<'a>(&'a self, action: &'a str) -> impl Iterator<Item = &'a LogRecord> + 'a {
        self.records.iter().filter(move |r| r.action == action)
    }
}
