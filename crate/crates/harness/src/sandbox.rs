//! Process-isolation sandbox.
//!
//! Every command runs in its own session with kernel resource limits, a
//! scrubbed environment and its working directory inside a throwaway work
//! tree. When the kernel allows it, each command also gets private mount
//! and network namespaces in which the platform's storage (and any other
//! configured path) is covered by an empty tmpfs. Running as root, each work
//! tree gets its own unprivileged uid and gid.
//!
//! A watchdog enforces the wall-clock deadline (SIGTERM, then SIGKILL after
//! the grace period) and the memory ceiling on the whole process group.

use std::ffi::CString;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read};
use std::os::unix::ffi::OsStrExt;
use std::os::unix::fs::{chown, PermissionsExt};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU32, Ordering};
use std::time::{Duration, Instant};

use peertest_core::model::normalize_rel_path;

use crate::profile::Limits;

pub const DEFAULT_GRACE: Duration = Duration::from_secs(1);
/// First uid/gid handed to sandboxed runs when started as root; each work
/// tree gets its own so concurrent runs cannot signal or read each other.
const RUN_ID_BASE: u32 = 200_000;
const RUN_ID_COUNT: u32 = 4096;
/// Shared by every sandbox in the process so that concurrent workers never
/// hand out the same id.
static NEXT_RUN_ID: AtomicU32 = AtomicU32::new(0);
const POLL: Duration = Duration::from_millis(5);
const FILE_SIZE_LIMIT: u64 = 64 * 1024 * 1024;
const SANDBOX_PATH: &str = "/usr/local/bin:/usr/bin:/bin";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Backend {
    /// Namespaces, rlimits and uid drop on the host kernel.
    Process,
    /// Wraps each command in a container runtime invocation. `{work_dir}` in
    /// the prefix is replaced by the run's work tree, which must be mounted
    /// at the same path inside the container.
    Container { prefix: Vec<String> },
}

#[derive(Debug, Clone)]
pub struct SandboxConfig {
    pub backend: Backend,
    /// Parent directory of per-run work trees.
    pub base_dir: PathBuf,
    /// Paths made unreachable from inside the sandbox.
    pub hidden_paths: Vec<PathBuf>,
    pub grace: Duration,
}

impl SandboxConfig {
    pub fn process(base_dir: impl Into<PathBuf>) -> Self {
        Self {
            backend: Backend::Process,
            base_dir: base_dir.into(),
            hidden_paths: Vec::new(),
            grace: DEFAULT_GRACE,
        }
    }
}

#[derive(Debug)]
pub struct Sandbox {
    config: SandboxConfig,
    namespaces: bool,
    privileged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LimitHit {
    Wall,
    Cpu,
    Memory,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Exit {
    Code(i32),
    Signal(i32),
    SpawnFailed(String),
}

#[derive(Debug, Clone)]
pub struct ProcessReport {
    pub exit: Exit,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub truncated: bool,
    pub limit: Option<LimitHit>,
    pub wall: Duration,
    pub cpu: Duration,
    pub max_rss_bytes: u64,
}

impl ProcessReport {
    pub fn exit_code(&self) -> Option<i32> {
        match self.exit {
            Exit::Code(c) => Some(c),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Invocation {
    pub argv: Vec<String>,
    pub cwd: PathBuf,
    pub stdin: Vec<u8>,
    /// Send stderr into the stdout capture, preserving interleaving.
    pub merge_stderr: bool,
    /// Hidden in addition to the configured paths, for this command only.
    pub extra_hidden: Vec<PathBuf>,
}

impl Invocation {
    pub fn new(argv: Vec<String>, cwd: impl Into<PathBuf>) -> Self {
        Self {
            argv,
            cwd: cwd.into(),
            stdin: Vec::new(),
            merge_stderr: false,
            extra_hidden: Vec::new(),
        }
    }
}

/// A throwaway work tree:
///
/// ```text
/// <base>/<id>/solution   target files, read-only
/// <base>/<id>/tests      suite files, read-only
/// <base>/<id>/scratch    working directory, writable by the run's uid
/// <base>/<id>/reports    writable, collected by xml_report
/// <base>/<id>.io/        captured stdio, never visible to the run
/// ```
///
/// Removed on drop.
#[derive(Debug)]
pub struct WorkDir {
    root: PathBuf,
    io_dir: PathBuf,
    owner: Option<(u32, u32)>,
}

impl WorkDir {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn solution_dir(&self) -> PathBuf {
        self.root.join("solution")
    }

    pub fn tests_dir(&self) -> PathBuf {
        self.root.join("tests")
    }

    pub fn scratch_dir(&self) -> PathBuf {
        self.root.join("scratch")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    /// Writes files into `dir` (solution or tests) and leaves them read-only.
    pub fn populate(&self, dir: &Path, files: &[(String, Vec<u8>)]) -> io::Result<()> {
        for (path, bytes) in files {
            let rel = normalize_rel_path(path)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
            let dest = dir.join(rel);
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(&dest, bytes)?;
            fs::set_permissions(&dest, fs::Permissions::from_mode(0o444))?;
        }
        Ok(())
    }

    fn destroy(&self) -> io::Result<()> {
        fs::remove_dir_all(&self.io_dir).ok();
        if fs::remove_dir_all(&self.root).is_ok() {
            return Ok(());
        }
        // Tests may leave unwritable directories behind.
        make_writable(&self.root);
        fs::remove_dir_all(&self.root)
    }
}

impl Drop for WorkDir {
    fn drop(&mut self) {
        if let Err(e) = self.destroy() {
            tracing::warn!(dir = %self.root.display(), "failed to remove work dir: {e}");
        }
    }
}

fn make_writable(dir: &Path) {
    fs::set_permissions(dir, fs::Permissions::from_mode(0o700)).ok();
    if let Ok(entries) = fs::read_dir(dir) {
        for e in entries.flatten() {
            if e.file_type().is_ok_and(|t| t.is_dir()) {
                make_writable(&e.path());
            }
        }
    }
}

impl Sandbox {
    pub fn new(config: SandboxConfig) -> io::Result<Self> {
        fs::create_dir_all(&config.base_dir)?;
        fs::set_permissions(&config.base_dir, fs::Permissions::from_mode(0o711))?;
        let base = config.base_dir.canonicalize()?;
        for hidden in &config.hidden_paths {
            if let Ok(h) = hidden.canonicalize() {
                if base.starts_with(&h) {
                    return Err(io::Error::new(
                        io::ErrorKind::InvalidInput,
                        format!(
                            "sandbox directory {} lies inside hidden path {}",
                            base.display(),
                            h.display()
                        ),
                    ));
                }
            }
        }
        // SAFETY: geteuid has no preconditions.
        let root = unsafe { libc::geteuid() } == 0;
        let mut sandbox = Self {
            config: SandboxConfig {
                base_dir: base,
                ..config
            },
            namespaces: false,
            privileged: root,
        };
        if sandbox.config.backend == Backend::Process {
            sandbox.namespaces = sandbox.probe_namespaces();
            if !sandbox.namespaces {
                tracing::warn!(
                    "mount/network namespaces unavailable; hidden paths rely on file permissions only"
                );
            }
        }
        Ok(sandbox)
    }

    /// Whether hidden paths are masked by private mounts.
    pub fn isolation_active(&self) -> bool {
        self.namespaces
    }

    pub fn drops_privileges(&self) -> bool {
        self.privileged
    }

    pub fn base_dir(&self) -> &Path {
        &self.config.base_dir
    }

    fn probe_namespaces(&mut self) -> bool {
        self.namespaces = true;
        let probe = self.create_workdir().and_then(|wd| {
            let inv = Invocation::new(
                vec!["/bin/sh".into(), "-c".into(), "exit 0".into()],
                wd.scratch_dir(),
            );
            let limits = Limits {
                wall_seconds: 5,
                cpu_seconds: 5,
                memory_bytes: 64 << 20,
                output_bytes: 1024,
            };
            self.run(&wd, &inv, &limits, Instant::now() + Duration::from_secs(5))
        });
        matches!(
            probe,
            Ok(ProcessReport {
                exit: Exit::Code(0),
                ..
            })
        )
    }

    pub fn create_workdir(&self) -> io::Result<WorkDir> {
        let id = uuid::Uuid::new_v4().simple().to_string();
        let root = self.config.base_dir.join(&id);
        let io_dir = self.config.base_dir.join(format!("{id}.io"));
        fs::create_dir(&io_dir)?;
        fs::set_permissions(&io_dir, fs::Permissions::from_mode(0o700))?;
        let wd = WorkDir {
            root,
            io_dir,
            owner: self.privileged.then(|| {
                let id = RUN_ID_BASE + NEXT_RUN_ID.fetch_add(1, Ordering::Relaxed) % RUN_ID_COUNT;
                (id, id)
            }),
        };
        fs::create_dir(&wd.root)?;
        // Only the run's own group may enter its tree.
        match wd.owner {
            Some((_, gid)) => {
                chown(&wd.root, Some(0), Some(gid))?;
                fs::set_permissions(&wd.root, fs::Permissions::from_mode(0o750))?;
            }
            None => fs::set_permissions(&wd.root, fs::Permissions::from_mode(0o755))?,
        }
        for dir in [wd.solution_dir(), wd.tests_dir()] {
            fs::create_dir(&dir)?;
            fs::set_permissions(&dir, fs::Permissions::from_mode(0o755))?;
        }
        for dir in [wd.scratch_dir(), wd.reports_dir()] {
            fs::create_dir(&dir)?;
            fs::set_permissions(&dir, fs::Permissions::from_mode(0o700))?;
            if let Some((uid, gid)) = wd.owner {
                chown(&dir, Some(uid), Some(gid))?;
            }
        }
        Ok(wd)
    }

    /// Runs one command to completion or until `deadline` (plus grace).
    pub fn run(
        &self,
        wd: &WorkDir,
        inv: &Invocation,
        limits: &Limits,
        deadline: Instant,
    ) -> io::Result<ProcessReport> {
        let start = Instant::now();
        let argv = match &self.config.backend {
            Backend::Process => inv.argv.clone(),
            Backend::Container { prefix } => container_argv(prefix, &wd.root, &inv.argv),
        };
        if argv.is_empty() {
            return Err(io::Error::new(io::ErrorKind::InvalidInput, "empty command"));
        }

        let stdin_path = wd.io_dir.join("stdin");
        let stdout_path = wd.io_dir.join("stdout");
        let stderr_path = wd.io_dir.join("stderr");
        fs::write(&stdin_path, &inv.stdin)?;
        let stdout = create_truncated(&stdout_path)?;
        let stderr = if inv.merge_stderr {
            stdout.try_clone()?
        } else {
            create_truncated(&stderr_path)?
        };

        let mut cmd = Command::new(&argv[0]);
        cmd.args(&argv[1..])
            .current_dir(&inv.cwd)
            .env_clear()
            .env("PATH", SANDBOX_PATH)
            .env("HOME", wd.scratch_dir())
            .env("TMPDIR", wd.scratch_dir())
            .env("LANG", "C.UTF-8")
            .stdin(Stdio::from(File::open(&stdin_path)?))
            .stdout(Stdio::from(stdout))
            .stderr(Stdio::from(stderr));

        let plan = ChildPlan::new(self, wd, inv, limits)?;
        // The child's peak RSS includes pages shared with this process
        // between fork and exec, so small peaks are not attributable.
        let parent_rss = self_rss_bytes();
        // SAFETY: the closure only issues raw syscalls on data prepared
        // before fork; it does not allocate or take locks.
        unsafe {
            cmd.pre_exec(move || plan.apply());
        }
        let child = match cmd.spawn() {
            Ok(c) => c,
            Err(e) => {
                return Ok(ProcessReport {
                    exit: Exit::SpawnFailed(format!("{}: {e}", argv[0])),
                    stdout: Vec::new(),
                    stderr: Vec::new(),
                    truncated: false,
                    limit: None,
                    wall: start.elapsed(),
                    cpu: Duration::ZERO,
                    max_rss_bytes: 0,
                })
            }
        };
        let pid = child.id() as libc::pid_t;
        let (status, usage, watchdog_hit, sampled_rss) = self.supervise(pid, limits, deadline);
        // Reap anything the command left running in its session.
        // SAFETY: signalling a process group we created.
        unsafe {
            libc::kill(-pid, libc::SIGKILL);
        }
        drop(child);

        let cpu = timeval(usage.ru_utime) + timeval(usage.ru_stime);
        let reported_rss = (usage.ru_maxrss.max(0) as u64) * 1024;
        let max_rss_bytes = if reported_rss > parent_rss {
            reported_rss
        } else {
            sampled_rss
        };
        let exit = if libc::WIFSIGNALED(status) {
            Exit::Signal(libc::WTERMSIG(status))
        } else {
            Exit::Code(libc::WEXITSTATUS(status))
        };
        let limit = watchdog_hit.or_else(|| match exit {
            Exit::Signal(libc::SIGXCPU) => Some(LimitHit::Cpu),
            Exit::Signal(libc::SIGKILL) if cpu >= Duration::from_secs(limits.cpu_seconds) => {
                Some(LimitHit::Cpu)
            }
            _ if max_rss_bytes > limits.memory_bytes => Some(LimitHit::Memory),
            _ => None,
        });

        let (stdout, truncated_out) = read_capped(&stdout_path, limits.output_bytes)?;
        let (stderr, truncated_err) = if inv.merge_stderr {
            (Vec::new(), false)
        } else {
            read_capped(&stderr_path, limits.output_bytes)?
        };
        Ok(ProcessReport {
            exit,
            stdout,
            stderr,
            truncated: truncated_out || truncated_err,
            limit,
            wall: start.elapsed(),
            cpu,
            max_rss_bytes,
        })
    }

    fn supervise(
        &self,
        pid: libc::pid_t,
        limits: &Limits,
        deadline: Instant,
    ) -> (i32, libc::rusage, Option<LimitHit>, u64) {
        let hard_deadline = deadline + self.config.grace;
        let mut hit = None;
        let mut term_sent = false;
        let mut last_rss_check = Instant::now();
        let mut status: i32 = 0;
        let mut peak = 0u64;
        // SAFETY: rusage is plain old data.
        let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
        loop {
            // SAFETY: waiting on our own child with valid out-pointers.
            let r = unsafe { libc::wait4(pid, &mut status, libc::WNOHANG, &mut usage) };
            if r == pid {
                return (status, usage, hit, peak);
            }
            if r < 0 && io::Error::last_os_error().raw_os_error() != Some(libc::EINTR) {
                // Not our child any more; nothing left to supervise.
                return (status, usage, hit, peak);
            }
            let now = Instant::now();
            if now >= deadline && !term_sent {
                hit.get_or_insert(LimitHit::Wall);
                // SAFETY: signalling the child's process group.
                unsafe { libc::kill(-pid, libc::SIGTERM) };
                term_sent = true;
            }
            if now >= hard_deadline {
                unsafe { libc::kill(-pid, libc::SIGKILL) };
            }
            if now.duration_since(last_rss_check) >= Duration::from_millis(20) {
                last_rss_check = now;
                let rss = group_rss_bytes(pid);
                peak = peak.max(rss);
                if rss > limits.memory_bytes {
                    hit.get_or_insert(LimitHit::Memory);
                    unsafe { libc::kill(-pid, libc::SIGKILL) };
                }
            }
            std::thread::sleep(POLL);
        }
    }
}

fn container_argv(prefix: &[String], work_dir: &Path, argv: &[String]) -> Vec<String> {
    let wd = work_dir.to_string_lossy();
    prefix
        .iter()
        .map(|p| p.replace("{work_dir}", &wd))
        .chain(argv.iter().cloned())
        .collect()
}

fn create_truncated(path: &Path) -> io::Result<File> {
    OpenOptions::new()
        .write(true)
        .create(true)
        .truncate(true)
        .open(path)
}

fn read_capped(path: &Path, cap: u64) -> io::Result<(Vec<u8>, bool)> {
    let file = File::open(path)?;
    let len = file.metadata()?.len();
    let mut buf = Vec::with_capacity(len.min(cap) as usize);
    file.take(cap).read_to_end(&mut buf)?;
    Ok((buf, len > cap))
}

fn timeval(tv: libc::timeval) -> Duration {
    Duration::from_secs(tv.tv_sec.max(0) as u64) + Duration::from_micros(tv.tv_usec.max(0) as u64)
}

fn self_rss_bytes() -> u64 {
    // SAFETY: sysconf has no preconditions.
    let page = unsafe { libc::sysconf(libc::_SC_PAGESIZE) }.max(4096) as u64;
    fs::read_to_string("/proc/self/statm")
        .ok()
        .and_then(|s| {
            s.split_whitespace()
                .nth(1)
                .and_then(|r| r.parse::<u64>().ok())
        })
        .map_or(0, |pages| pages * page)
}

/// Resident memory of every process in the group led by `pgid`.
fn group_rss_bytes(pgid: libc::pid_t) -> u64 {
    // SAFETY: sysconf has no preconditions.
    let page = unsafe { libc::sysconf(libc::_SC_PAGESIZE) }.max(4096) as u64;
    let Ok(entries) = fs::read_dir("/proc") else {
        return 0;
    };
    let mut pages = 0u64;
    for e in entries.flatten() {
        let name = e.file_name();
        if !name.as_bytes().iter().all(u8::is_ascii_digit) {
            continue;
        }
        let Ok(stat) = fs::read_to_string(e.path().join("stat")) else {
            continue;
        };
        // Fields after the parenthesised command name: state ppid pgrp ... rss is the 22nd.
        let Some(rest) = stat.rfind(')').map(|i| &stat[i + 1..]) else {
            continue;
        };
        let fields: Vec<&str> = rest.split_whitespace().collect();
        if fields.get(2).and_then(|p| p.parse::<libc::pid_t>().ok()) == Some(pgid) {
            pages += fields
                .get(21)
                .and_then(|r| r.parse::<u64>().ok())
                .unwrap_or(0);
        }
    }
    pages * page
}

/// Everything the child needs after fork, prepared up front.
struct ChildPlan {
    namespaces: bool,
    user_ns: bool,
    uid_map: CString,
    gid_map: CString,
    hidden: Vec<CString>,
    tmpfs: CString,
    tmpfs_opts: CString,
    root: CString,
    setgroups_path: CString,
    uid_map_path: CString,
    gid_map_path: CString,
    deny: CString,
    drop_to: Option<(u32, u32)>,
    limits: Vec<(libc::__rlimit_resource_t, u64, u64)>,
}

fn cstring(s: impl AsRef<[u8]>) -> io::Result<CString> {
    CString::new(s.as_ref()).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))
}

impl ChildPlan {
    fn new(sandbox: &Sandbox, wd: &WorkDir, inv: &Invocation, limits: &Limits) -> io::Result<Self> {
        // SAFETY: id getters have no preconditions.
        let (uid, gid) = unsafe { (libc::geteuid(), libc::getegid()) };
        let mut hidden = Vec::new();
        for p in sandbox.config.hidden_paths.iter().chain(&inv.extra_hidden) {
            if p.exists() {
                hidden.push(cstring(p.as_os_str().as_bytes())?);
            }
        }
        let mut rl = vec![
            (libc::RLIMIT_CPU, limits.cpu_seconds, limits.cpu_seconds + 1),
            // Address space is a backstop; the watchdog enforces resident memory.
            (
                libc::RLIMIT_AS,
                limits.memory_bytes.saturating_mul(4),
                limits.memory_bytes.saturating_mul(4),
            ),
            (libc::RLIMIT_FSIZE, FILE_SIZE_LIMIT, FILE_SIZE_LIMIT),
            (libc::RLIMIT_CORE, 0, 0),
            (libc::RLIMIT_NOFILE, 256, 256),
        ];
        if wd.owner.is_some() {
            rl.push((libc::RLIMIT_NPROC, 512, 512));
        }
        Ok(Self {
            namespaces: sandbox.namespaces && sandbox.config.backend == Backend::Process,
            user_ns: uid != 0,
            uid_map: cstring(format!("{uid} {uid} 1"))?,
            gid_map: cstring(format!("{gid} {gid} 1"))?,
            hidden,
            tmpfs: cstring("tmpfs")?,
            tmpfs_opts: cstring("size=4k,mode=000")?,
            root: cstring("/")?,
            setgroups_path: cstring("/proc/self/setgroups")?,
            uid_map_path: cstring("/proc/self/uid_map")?,
            gid_map_path: cstring("/proc/self/gid_map")?,
            deny: cstring("deny")?,
            drop_to: wd.owner,
            limits: rl,
        })
    }

    /// Runs in the forked child before exec.
    fn apply(&self) -> io::Result<()> {
        // SAFETY: raw syscalls on pointers into `self`, which outlives exec.
        unsafe {
            check(libc::setsid())?;
            if self.namespaces {
                let mut flags = libc::CLONE_NEWNS | libc::CLONE_NEWNET;
                if self.user_ns {
                    flags |= libc::CLONE_NEWUSER;
                }
                check(libc::unshare(flags))?;
                if self.user_ns {
                    write_file(&self.setgroups_path, &self.deny)?;
                    write_file(&self.uid_map_path, &self.uid_map)?;
                    write_file(&self.gid_map_path, &self.gid_map)?;
                }
                check(libc::mount(
                    std::ptr::null(),
                    self.root.as_ptr(),
                    std::ptr::null(),
                    libc::MS_REC | libc::MS_PRIVATE,
                    std::ptr::null(),
                ))?;
                for path in &self.hidden {
                    check(libc::mount(
                        self.tmpfs.as_ptr(),
                        path.as_ptr(),
                        self.tmpfs.as_ptr(),
                        libc::MS_NOSUID | libc::MS_NODEV | libc::MS_NOEXEC,
                        self.tmpfs_opts.as_ptr().cast(),
                    ))?;
                }
            }
            for &(resource, soft, hard) in &self.limits {
                let rl = libc::rlimit {
                    rlim_cur: soft,
                    rlim_max: hard,
                };
                check(libc::setrlimit(resource, &rl))?;
            }
            if let Some((uid, gid)) = self.drop_to {
                check(libc::setgroups(0, std::ptr::null()))?;
                check(libc::setgid(gid))?;
                check(libc::setuid(uid))?;
            }
        }
        Ok(())
    }
}

fn check(r: libc::c_int) -> io::Result<()> {
    if r < 0 {
        Err(io::Error::last_os_error())
    } else {
        Ok(())
    }
}

unsafe fn write_file(path: &CString, contents: &CString) -> io::Result<()> {
    let fd = libc::open(path.as_ptr(), libc::O_WRONLY | libc::O_CLOEXEC);
    if fd < 0 {
        return Err(io::Error::last_os_error());
    }
    let bytes = contents.as_bytes();
    let n = libc::write(fd, bytes.as_ptr().cast(), bytes.len());
    libc::close(fd);
    if n != bytes.len() as isize {
        return Err(io::Error::last_os_error());
    }
    Ok(())
}
