//! Orchestrator-owned cgroup v2 subtree: `<root>/bouquet/<run-id>/<client-idx>`.
//!
//! The root may also be an ordinary directory (tests point
//! `BOUQUET_CGROUP_ROOT` at a temp dir). Interface files are then plain files
//! and directories are removed recursively instead of with `rmdir`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

pub const OWNER_DIR: &str = "bouquet";
pub const ENV_CGROUP_ROOT: &str = "BOUQUET_CGROUP_ROOT";

const CGROUP2_SUPER_MAGIC: i64 = 0x6367_7270;

pub fn is_cgroup2_fs(path: &Path) -> bool {
    use std::ffi::CString;
    use std::os::unix::ffi::OsStrExt;
    let Ok(c) = CString::new(path.as_os_str().as_bytes()) else {
        return false;
    };
    let mut buf: libc::statfs = unsafe { std::mem::zeroed() };
    // SAFETY: `c` is a valid NUL-terminated path and `buf` is a properly sized out-parameter.
    let rc = unsafe { libc::statfs(c.as_ptr(), &mut buf) };
    rc == 0 && buf.f_type as i64 == CGROUP2_SUPER_MAGIC
}

/// Finds the cgroup v2 mount: `BOUQUET_CGROUP_ROOT` if set, else the first
/// `cgroup2` entry of `/proc/self/mounts`.
pub fn detect_root() -> Option<PathBuf> {
    if let Some(p) = std::env::var_os(ENV_CGROUP_ROOT) {
        return Some(PathBuf::from(p));
    }
    let mounts = fs::read_to_string("/proc/self/mounts").ok()?;
    mounts.lines().find_map(|line| {
        let mut parts = line.split_whitespace();
        let _dev = parts.next()?;
        let mount_point = parts.next()?;
        (parts.next()? == "cgroup2").then(|| PathBuf::from(mount_point))
    })
}

pub fn owner_dir(root: &Path) -> PathBuf {
    root.join(OWNER_DIR)
}

fn enable_memory_controller(dir: &Path) {
    let control = dir.join("cgroup.subtree_control");
    if control.exists() {
        let current = fs::read_to_string(&control).unwrap_or_default();
        if !current.split_whitespace().any(|c| c == "memory") {
            // Fails when the controller is unavailable; memory.max then won't exist.
            let _ = fs::write(&control, "+memory");
        }
    }
}

/// Creates `<root>/bouquet/<rel>`, delegating the memory controller down the
/// path when the root is a real cgroup mount.
pub fn create_leaf(root: &Path, rel: &str) -> io::Result<PathBuf> {
    let real = is_cgroup2_fs(root);
    let mut dir = root.to_path_buf();
    if real {
        enable_memory_controller(&dir);
    }
    let leaf = owner_dir(root).join(rel);
    let mut components = vec![OWNER_DIR.to_string()];
    components.extend(rel.split('/').filter(|c| !c.is_empty()).map(str::to_string));
    let last = components.len() - 1;
    for (i, c) in components.iter().enumerate() {
        dir.push(c);
        if i == last {
            fs::create_dir(&dir)?;
        } else {
            match fs::create_dir(&dir) {
                Ok(()) => {}
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {}
                Err(e) => return Err(e),
            }
            if real {
                enable_memory_controller(&dir);
            }
        }
    }
    Ok(leaf)
}

pub fn write_memory_max(leaf: &Path, bytes: u64) -> io::Result<()> {
    fs::write(leaf.join("memory.max"), bytes.to_string())?;
    let swap = leaf.join("memory.swap.max");
    if swap.exists() {
        let _ = fs::write(swap, "0");
    }
    Ok(())
}

pub fn read_memory_max(leaf: &Path) -> Option<String> {
    fs::read_to_string(leaf.join("memory.max"))
        .ok()
        .map(|s| s.trim().to_string())
}

/// `oom_kill` counter from `memory.events`.
pub fn read_oom_kills(leaf: &Path) -> Option<u64> {
    let events = fs::read_to_string(leaf.join("memory.events")).ok()?;
    events.lines().find_map(|l| {
        let mut it = l.split_whitespace();
        (it.next()? == "oom_kill").then(|| it.next()?.parse().ok())?
    })
}

pub fn read_memory_peak(leaf: &Path) -> Option<u64> {
    fs::read_to_string(leaf.join("memory.peak")).ok()?.trim().parse().ok()
}

/// Leaf directories (no subdirectories) below `<root>/bouquet`, deepest first.
pub fn list_leaves(root: &Path) -> Vec<PathBuf> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) {
        let mut subdirs: Vec<PathBuf> = fs::read_dir(dir)
            .into_iter()
            .flatten()
            .flatten()
            .filter(|e| e.file_type().map(|t| t.is_dir()).unwrap_or(false))
            .map(|e| e.path())
            .collect();
        subdirs.sort();
        for d in &subdirs {
            let before = out.len();
            walk(d, out);
            if out.len() == before {
                out.push(d.clone());
            }
        }
    }
    let mut out = Vec::new();
    let owner = owner_dir(root);
    if owner.is_dir() {
        walk(&owner, &mut out);
    }
    out
}

fn pids(leaf: &Path) -> Vec<i32> {
    fs::read_to_string(leaf.join("cgroup.procs"))
        .unwrap_or_default()
        .split_whitespace()
        .filter_map(|p| p.parse().ok())
        .filter(|&p| p > 1)
        .collect()
}

/// True when `/proc/<pid>/environ` carries the orchestrator's profile key,
/// i.e. the process was spawned by us.
fn is_orchestrator_child(pid: i32) -> bool {
    fs::read(format!("/proc/{pid}/environ"))
        .map(|env| {
            env.split(|&b| b == 0)
                .any(|kv| kv.starts_with(crate::profiles::ENV_PROFILE_ID.as_bytes()))
        })
        .unwrap_or(false)
}

/// Kills every process in the cgroup. Returns how many were signalled.
pub fn kill_members(leaf: &Path, real: bool) -> usize {
    if real {
        let kill = leaf.join("cgroup.kill");
        if kill.exists() && fs::write(&kill, "1").is_ok() {
            return pids(leaf).len();
        }
    }
    let mut n = 0;
    for pid in pids(leaf) {
        if real || is_orchestrator_child(pid) {
            // SAFETY: plain syscall on a pid; failure is harmless.
            if unsafe { libc::kill(pid, libc::SIGKILL) } == 0 {
                n += 1;
            }
        }
    }
    n
}

fn remove_one(dir: &Path, real: bool) -> io::Result<()> {
    if !real {
        return fs::remove_dir_all(dir);
    }
    let mut last = None;
    for _ in 0..100 {
        match fs::remove_dir(dir) {
            Ok(()) => return Ok(()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
            Err(e) => last = Some(e),
        }
        thread::sleep(Duration::from_millis(20));
    }
    Err(last.expect("loop ran"))
}

/// Kills the leaf's processes and removes it, then prunes empty ancestors up
/// to and including `<root>/bouquet`.
pub fn remove_leaf(root: &Path, leaf: &Path) -> io::Result<()> {
    let real = is_cgroup2_fs(root);
    if leaf.exists() {
        kill_members(leaf, real);
        remove_one(leaf, real)?;
    }
    let owner = owner_dir(root);
    let mut parent = leaf.parent();
    while let Some(dir) = parent {
        if !dir.starts_with(&owner) || !dir.exists() {
            break;
        }
        let has_subdirs = fs::read_dir(dir)?
            .flatten()
            .any(|e| e.file_type().map(|t| t.is_dir()).unwrap_or(false));
        if has_subdirs {
            break;
        }
        remove_one(dir, real)?;
        if dir == owner {
            break;
        }
        parent = dir.parent();
    }
    Ok(())
}

/// Writes `value` into a scratch cgroup's `memory.max` and reads it back.
pub fn memory_roundtrip_probe(root: &Path) -> Result<(), String> {
    if !is_cgroup2_fs(root) {
        return Err(format!("{} is not a cgroup2 mount", root.display()));
    }
    let controllers = fs::read_to_string(root.join("cgroup.controllers")).unwrap_or_default();
    if !controllers.split_whitespace().any(|c| c == "memory") {
        return Err("memory controller not available in the cgroup v2 hierarchy".into());
    }
    enable_memory_controller(root);
    let scratch = root.join(format!("bouquet-probe-{}", std::process::id()));
    fs::create_dir(&scratch).map_err(|e| format!("cannot create scratch cgroup: {e}"))?;
    let value = 64 * crate::MIB;
    let result = fs::write(scratch.join("memory.max"), value.to_string())
        .map_err(|e| format!("cannot write memory.max: {e}"))
        .and_then(|()| match read_memory_max(&scratch) {
            Some(v) if v == value.to_string() => Ok(()),
            other => Err(format!("memory.max read back {other:?}, expected {value}")),
        });
    let _ = fs::remove_dir(&scratch);
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_dir_leaf_lifecycle() {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path();
        assert!(!is_cgroup2_fs(root));
        let leaf = create_leaf(root, "run-1/0").unwrap();
        write_memory_max(&leaf, 1234).unwrap();
        assert_eq!(read_memory_max(&leaf).as_deref(), Some("1234"));
        assert_eq!(list_leaves(root), vec![leaf.clone()]);
        assert!(create_leaf(root, "run-1/0").is_err());
        let second = create_leaf(root, "run-1/1").unwrap();
        remove_leaf(root, &leaf).unwrap();
        assert!(owner_dir(root).exists());
        remove_leaf(root, &second).unwrap();
        assert!(!owner_dir(root).exists());
        assert!(list_leaves(root).is_empty());
    }

    #[test]
    fn memory_events_parsing() {
        let tmp = tempfile::tempdir().unwrap();
        fs::write(
            tmp.path().join("memory.events"),
            "low 0\nhigh 0\nmax 3\noom 1\noom_kill 1\noom_group_kill 0\n",
        )
        .unwrap();
        assert_eq!(read_oom_kills(tmp.path()), Some(1));
        fs::write(tmp.path().join("memory.peak"), "4096\n").unwrap();
        assert_eq!(read_memory_peak(tmp.path()), Some(4096));
    }

    #[test]
    fn probe_rejects_plain_dir() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(memory_roundtrip_probe(tmp.path()).is_err());
    }
}
