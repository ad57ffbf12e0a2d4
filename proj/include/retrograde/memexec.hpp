#pragma once

#include <cerrno>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "error.hpp"

#if defined(__linux__)
#include <sys/mman.h>
#include <unistd.h>
#endif

namespace retrograde {

constexpr std::uint64_t page_align_down(std::uint64_t addr, std::uint64_t page_size) {
    return addr & ~(page_size - 1);
}

/// Anonymous in-memory file holding a staged payload. The image never
/// touches the filesystem; it is reachable only through /proc fd links.
class StagedImage {
public:
    StagedImage() = default;
    StagedImage(int fd, std::string path) : fd_(fd), path_(std::move(path)) {}
    StagedImage(StagedImage&& other) noexcept
        : fd_(std::exchange(other.fd_, -1)), path_(std::move(other.path_)) {}
    StagedImage& operator=(StagedImage&& other) noexcept {
        if (this != &other) {
            reset();
            fd_ = std::exchange(other.fd_, -1);
            path_ = std::move(other.path_);
        }
        return *this;
    }
    StagedImage(const StagedImage&) = delete;
    StagedImage& operator=(const StagedImage&) = delete;
    ~StagedImage() { reset(); }

    bool valid() const { return fd_ >= 0; }
    int fd() const { return fd_; }
    /// Path naming the fd in the stager's own /proc entry.
    const std::string& path() const { return path_; }
    /// Path a forked child (which inherits the fd) can exec directly.
    std::string self_path() const { return "/proc/self/fd/" + std::to_string(fd_); }

    void reset() {
#if defined(__linux__)
        if (fd_ >= 0) ::close(fd_);
#endif
        fd_ = -1;
        path_.clear();
    }

private:
    int fd_ = -1;
    std::string path_;
};

/// Copy an image into an anonymous memory-backed file and return the fd
/// plus its /proc path, ready to be exec'd without any on-disk artifact.
inline StagedImage memfd_stage(std::span<const std::uint8_t> bytes,
                               const std::string& name = "payload") {
#if defined(__linux__)
    int fd = ::memfd_create(name.c_str(), 1 /* close-on-exec */);
    if (fd < 0) throw error(errc::stage_failed, std::string("memfd_create: ") + std::strerror(errno));
    std::size_t done = 0;
    while (done < bytes.size()) {
        ssize_t n = ::write(fd, bytes.data() + done, bytes.size() - done);
        if (n < 0) {
            if (errno == EINTR) continue;
            int e = errno;
            ::close(fd);
            throw error(errc::stage_failed, std::string("write: ") + std::strerror(e));
        }
        done += static_cast<std::size_t>(n);
    }
    std::string path = "/proc/" + std::to_string(::getpid()) + "/fd/" + std::to_string(fd);
    return StagedImage(fd, std::move(path));
#else
    (void)bytes;
    (void)name;
    throw error(errc::unsupported_platform, "in-memory staging requires Linux");
#endif
}

/// Flip the pages holding `code` to read/write/execute, call the buffer as
/// a function, then drop execute again. The code must follow the SysV call
/// convention: no arguments, result in rax, terminated by ret.
inline std::uint64_t shellcode_run(std::span<const std::uint8_t> code) {
#if defined(__linux__)
    if (code.empty()) throw error(errc::out_of_range, "empty code buffer");
    auto page = static_cast<std::uint64_t>(::sysconf(_SC_PAGESIZE));
    std::vector<std::uint8_t> buf(code.begin(), code.end());

    auto addr = reinterpret_cast<std::uintptr_t>(buf.data());
    std::uint64_t lo = page_align_down(addr, page);
    std::size_t span = static_cast<std::size_t>(addr + buf.size() - lo);
    if (::mprotect(reinterpret_cast<void*>(lo), span, PROT_READ | PROT_WRITE | PROT_EXEC) != 0)
        throw error(errc::protect_failed, std::string("mprotect: ") + std::strerror(errno));

    using Fn = std::uint64_t (*)();
    auto fn = reinterpret_cast<Fn>(reinterpret_cast<void*>(addr));
    std::uint64_t result = fn();

    ::mprotect(reinterpret_cast<void*>(lo), span, PROT_READ | PROT_WRITE);
    return result;
#else
    (void)code;
    throw error(errc::unsupported_platform, "shellcode execution requires Linux");
#endif
}

} // namespace retrograde
