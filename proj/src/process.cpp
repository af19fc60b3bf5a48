#include "insitu/process.hpp"

#include <fcntl.h>
#include <linux/landlock.h>
#include <poll.h>
#include <signal.h>
#include <sys/prctl.h>
#include <sys/syscall.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <system_error>

namespace insitu {

namespace {

constexpr std::uint64_t kAccessRefer = 1ULL << 13;
constexpr std::uint64_t kAccessTruncate = 1ULL << 14;

constexpr std::uint64_t kWriteAccessAbi1 =
    LANDLOCK_ACCESS_FS_WRITE_FILE | LANDLOCK_ACCESS_FS_REMOVE_DIR | LANDLOCK_ACCESS_FS_REMOVE_FILE |
    LANDLOCK_ACCESS_FS_MAKE_CHAR | LANDLOCK_ACCESS_FS_MAKE_DIR | LANDLOCK_ACCESS_FS_MAKE_REG |
    LANDLOCK_ACCESS_FS_MAKE_SOCK | LANDLOCK_ACCESS_FS_MAKE_FIFO | LANDLOCK_ACCESS_FS_MAKE_BLOCK |
    LANDLOCK_ACCESS_FS_MAKE_SYM;

int landlock_abi() {
  static const int abi = [] {
    long v = syscall(__NR_landlock_create_ruleset, nullptr, 0, LANDLOCK_CREATE_RULESET_VERSION);
    return v < 0 ? 0 : static_cast<int>(v);
  }();
  return abi;
}

struct Fd {
  int fd = -1;
  Fd() = default;
  explicit Fd(int f) : fd(f) {}
  Fd(const Fd&) = delete;
  Fd& operator=(const Fd&) = delete;
  ~Fd() { reset(); }
  void reset() {
    if (fd >= 0) ::close(fd);
    fd = -1;
  }
};

[[noreturn]] void throw_errno(const std::string& what) { throw std::system_error(errno, std::generic_category(), what); }

// Builds the ruleset in the parent; the child only has to enforce it.
int build_ruleset(const std::vector<std::filesystem::path>& dirs) {
  const int abi = landlock_abi();
  std::uint64_t handled = kWriteAccessAbi1;
  if (abi >= 2) handled |= kAccessRefer;
  if (abi >= 3) handled |= kAccessTruncate;
  landlock_ruleset_attr attr{};
  attr.handled_access_fs = handled;
  int rs = static_cast<int>(syscall(__NR_landlock_create_ruleset, &attr, sizeof(attr), 0));
  if (rs < 0) throw_errno("landlock_create_ruleset");

  auto add = [&](const std::filesystem::path& p, std::uint64_t access) {
    Fd target(::open(p.c_str(), O_PATH | O_CLOEXEC));
    if (target.fd < 0) throw_errno("open " + p.string());
    landlock_path_beneath_attr rule{};
    rule.allowed_access = access;
    rule.parent_fd = target.fd;
    if (syscall(__NR_landlock_add_rule, rs, LANDLOCK_RULE_PATH_BENEATH, &rule, 0) != 0) {
      throw_errno("landlock_add_rule " + p.string());
    }
  };
  try {
    for (const auto& d : dirs) add(d, handled);
    std::uint64_t devnull = LANDLOCK_ACCESS_FS_WRITE_FILE | (abi >= 3 ? kAccessTruncate : 0);
    add("/dev/null", devnull);
  } catch (...) {
    ::close(rs);
    throw;
  }
  return rs;
}

void set_nonblocking(int fd) { ::fcntl(fd, F_SETFL, ::fcntl(fd, F_GETFL) | O_NONBLOCK); }

}  // namespace

bool write_confinement_available() { return landlock_abi() >= 1; }

std::optional<std::filesystem::path> find_program(const std::string& name) {
  if (name.find('/') != std::string::npos) return std::filesystem::path(name);
  const char* path = std::getenv("PATH");
  std::string_view rest = path ? path : "/usr/local/bin:/usr/bin:/bin";
  while (!rest.empty()) {
    auto colon = rest.find(':');
    std::filesystem::path candidate = std::filesystem::path(rest.substr(0, colon)) / name;
    if (::access(candidate.c_str(), X_OK) == 0) return candidate;
    if (colon == std::string_view::npos) break;
    rest.remove_prefix(colon + 1);
  }
  return std::nullopt;
}

ProcessOutcome run_process(const ProcessSpec& spec) {
  if (spec.argv.empty()) throw std::invalid_argument("run_process: empty argv");
  auto program = find_program(spec.argv[0]);
  if (!program) throw std::system_error(ENOENT, std::generic_category(), "program not found: " + spec.argv[0]);

  ProcessOutcome outcome;
  Fd ruleset;
  if (!spec.writable_dirs.empty() && write_confinement_available()) {
    ruleset.fd = build_ruleset(spec.writable_dirs);
    outcome.confined = true;
  }

  // Everything the child touches is prepared before fork.
  std::vector<char*> argv;
  for (const auto& a : spec.argv) argv.push_back(const_cast<char*>(a.c_str()));
  argv.push_back(nullptr);
  std::vector<char*> envp;
  for (const auto& e : spec.env) envp.push_back(const_cast<char*>(e.c_str()));
  envp.push_back(nullptr);
  const std::string prog = program->string();
  const std::string cwd = spec.cwd.string();

  int in_pipe[2], out_pipe[2], err_pipe[2];
  if (::pipe2(in_pipe, O_CLOEXEC) != 0) throw_errno("pipe");
  Fd in_r(in_pipe[0]), in_w(in_pipe[1]);
  if (::pipe2(out_pipe, O_CLOEXEC) != 0) throw_errno("pipe");
  Fd out_r(out_pipe[0]), out_w(out_pipe[1]);
  if (::pipe2(err_pipe, O_CLOEXEC) != 0) throw_errno("pipe");
  Fd err_r(err_pipe[0]), err_w(err_pipe[1]);

  const auto start = std::chrono::steady_clock::now();
  pid_t pid = ::fork();
  if (pid < 0) throw_errno("fork");
  if (pid == 0) {
    ::setpgid(0, 0);
    ::signal(SIGPIPE, SIG_DFL);
    if (::dup2(in_r.fd, 0) < 0 || ::dup2(out_w.fd, 1) < 0 || ::dup2(err_w.fd, 2) < 0) ::_exit(126);
    if (!cwd.empty() && ::chdir(cwd.c_str()) != 0) ::_exit(126);
    if (ruleset.fd >= 0) {
      if (::prctl(PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) != 0) ::_exit(126);
      if (syscall(__NR_landlock_restrict_self, ruleset.fd, 0) != 0) ::_exit(126);
    }
    ::execve(prog.c_str(), argv.data(), envp.data());
    ::_exit(127);
  }
  ::setpgid(pid, pid);
  ruleset.reset();
  in_r.reset();
  out_w.reset();
  err_w.reset();

  set_nonblocking(in_w.fd);
  set_nonblocking(out_r.fd);
  set_nonblocking(err_r.fd);

  std::size_t written = 0;
  if (spec.stdin_data.empty()) in_w.reset();
  const auto deadline = start + spec.timeout;
  char buf[65536];

  while (out_r.fd >= 0 || err_r.fd >= 0) {
    auto now = std::chrono::steady_clock::now();
    if (now >= deadline) {
      outcome.timed_out = true;
      break;
    }
    pollfd fds[3];
    int n = 0;
    if (in_w.fd >= 0) fds[n++] = {in_w.fd, POLLOUT, 0};
    if (out_r.fd >= 0) fds[n++] = {out_r.fd, POLLIN, 0};
    if (err_r.fd >= 0) fds[n++] = {err_r.fd, POLLIN, 0};
    auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now).count();
    int rc = ::poll(fds, n, static_cast<int>(std::max<long long>(1, left)));
    if (rc < 0) {
      if (errno == EINTR) continue;
      throw_errno("poll");
    }
    for (int i = 0; i < n; ++i) {
      if (!fds[i].revents) continue;
      int fd = fds[i].fd;
      if (fd == in_w.fd) {
        ssize_t w = ::write(fd, spec.stdin_data.data() + written, spec.stdin_data.size() - written);
        if (w > 0) written += static_cast<std::size_t>(w);
        if (w < 0 && errno != EAGAIN) in_w.reset();
        if (written == spec.stdin_data.size()) in_w.reset();
        continue;
      }
      ssize_t r = ::read(fd, buf, sizeof(buf));
      if (r < 0 && errno == EAGAIN) continue;
      if (r <= 0) {
        (fd == out_r.fd ? out_r : err_r).reset();
        continue;
      }
      if (fd == out_r.fd) {
        std::size_t room = spec.max_stdout_bytes - std::min(spec.max_stdout_bytes, outcome.stdout_data.size());
        if (static_cast<std::size_t>(r) > room) outcome.stdout_overflow = true;
        outcome.stdout_data.append(buf, std::min(room, static_cast<std::size_t>(r)));
      } else {
        outcome.stderr_tail.append(buf, static_cast<std::size_t>(r));
        if (outcome.stderr_tail.size() > spec.max_stderr_bytes) {
          outcome.stderr_tail.erase(0, outcome.stderr_tail.size() - spec.max_stderr_bytes);
        }
      }
    }
  }
  in_w.reset();

  int status = 0;
  if (outcome.timed_out) {
    ::kill(-pid, SIGKILL);
    ::kill(pid, SIGKILL);
    ::waitpid(pid, &status, 0);
  } else {
    // Pipes closed; the child may still be exiting.
    while (true) {
      pid_t w = ::waitpid(pid, &status, WNOHANG);
      if (w == pid) break;
      if (std::chrono::steady_clock::now() >= deadline) {
        outcome.timed_out = true;
        ::kill(-pid, SIGKILL);
        ::kill(pid, SIGKILL);
        ::waitpid(pid, &status, 0);
        break;
      }
      ::usleep(2000);
    }
  }
  // Reap any stragglers left in the group.
  ::kill(-pid, SIGKILL);

  if (WIFEXITED(status)) outcome.exit_code = WEXITSTATUS(status);
  if (WIFSIGNALED(status)) outcome.term_signal = WTERMSIG(status);
  outcome.wall_time =
      std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start);
  return outcome;
}

}  // namespace insitu
