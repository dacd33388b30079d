// SPDX-License-Identifier: Apache-2.0
//
// Positioned file access with optional direct (page-cache bypassing) I/O,
// 4096-aligned buffers and per-layer byte accounting.

#pragma once

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <vector>

#include "pushgnn/common.hpp"

namespace pushgnn {

namespace fs = std::filesystem;

/// Byte counters shared by the stages of one layer. Each field has a single
/// writer thread; readers look at them after the stages are joined.
struct IoCounters {
  std::atomic<std::uint64_t> feature_bytes_read{0};   // spill row sections
  std::atomic<std::uint64_t> index_bytes_read{0};     // spill headers + id arrays
  std::atomic<std::uint64_t> topology_bytes_read{0};  // CSR offsets + neighbors
  std::atomic<std::uint64_t> cold_bytes_read{0};
  std::atomic<std::uint64_t> feature_bytes_written{0};  // spill row sections, padded
  std::atomic<std::uint64_t> spill_bytes_written{0};    // whole spill files
  std::atomic<std::uint64_t> cold_bytes_written{0};
  std::atomic<std::uint64_t> spill_read_calls{0};
  std::atomic<std::uint64_t> spills_opened{0};
  std::atomic<std::uint64_t> direct_io_fallbacks{0};

  [[nodiscard]] std::uint64_t total_read() const {
    return feature_bytes_read + index_bytes_read + topology_bytes_read + cold_bytes_read;
  }
  [[nodiscard]] std::uint64_t total_written() const {
    return spill_bytes_written + cold_bytes_written;
  }
};

inline void bump(std::atomic<std::uint64_t>& c, std::uint64_t n) {
  c.fetch_add(n, std::memory_order_relaxed);
}

/// Heap buffer aligned to kAlignment, sized up to a multiple of kAlignment.
class AlignedBuffer {
 public:
  AlignedBuffer() = default;
  explicit AlignedBuffer(std::size_t bytes) { resize(bytes); }

  void resize(std::size_t bytes) {
    const std::size_t cap = align_up(std::max<std::size_t>(bytes, 1));
    if (cap > capacity_) {
      void* p = std::aligned_alloc(kAlignment, cap);
      if (p == nullptr) throw std::bad_alloc();
      data_.reset(static_cast<std::byte*>(p));
      capacity_ = cap;
    }
    size_ = bytes;
  }

  [[nodiscard]] std::byte* data() { return data_.get(); }
  [[nodiscard]] const std::byte* data() const { return data_.get(); }
  [[nodiscard]] std::size_t size() const { return size_; }
  [[nodiscard]] std::size_t capacity() const { return capacity_; }
  [[nodiscard]] std::span<std::byte> bytes() { return {data_.get(), size_}; }
  [[nodiscard]] std::span<const std::byte> bytes() const { return {data_.get(), size_}; }

 private:
  struct FreeDeleter {
    void operator()(std::byte* p) const { std::free(p); }
  };
  std::unique_ptr<std::byte, FreeDeleter> data_;
  std::size_t size_ = 0;
  std::size_t capacity_ = 0;
};

enum class IoMode { direct, buffered };

/// Owning file descriptor with positioned read/write helpers.
class File {
 public:
  File() = default;
  File(const File&) = delete;
  File& operator=(const File&) = delete;
  File(File&& o) noexcept : fd_(std::exchange(o.fd_, -1)), direct_(o.direct_), path_(std::move(o.path_)) {}
  File& operator=(File&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = std::exchange(o.fd_, -1);
      direct_ = o.direct_;
      path_ = std::move(o.path_);
    }
    return *this;
  }
  ~File() { close(); }

  // Direct mode falls back to buffered access when the filesystem rejects
  // O_DIRECT; the counter records it.
  static File open_read(const fs::path& p, IoMode mode, IoCounters* counters = nullptr) {
    return open_impl(p, O_RDONLY, mode, counters);
  }
  static File create(const fs::path& p, IoMode mode, IoCounters* counters = nullptr) {
    return open_impl(p, O_RDWR | O_CREAT | O_TRUNC, mode, counters);
  }
  static File open_rw(const fs::path& p) { return open_impl(p, O_RDWR | O_CREAT, IoMode::buffered, nullptr); }

  [[nodiscard]] bool is_open() const { return fd_ >= 0; }
  [[nodiscard]] bool direct() const { return direct_; }
  [[nodiscard]] const fs::path& path() const { return path_; }

  [[nodiscard]] std::uint64_t size() const {
    struct stat st {};
    if (::fstat(fd_, &st) != 0) fail(Errc::io, "fstat " + path_.string() + ": " + std::strerror(errno));
    return static_cast<std::uint64_t>(st.st_size);
  }

  /// Reads up to out.size() bytes at offset; returns the count (short only at EOF).
  std::size_t read_at(std::span<std::byte> out, std::uint64_t offset) const {
    std::size_t done = 0;
    while (done < out.size()) {
      const ssize_t n = ::pread(fd_, out.data() + done, out.size() - done, static_cast<off_t>(offset + done));
      if (n < 0) {
        if (errno == EINTR) continue;
        fail(Errc::io, "pread " + path_.string() + ": " + std::strerror(errno));
      }
      if (n == 0) break;
      done += static_cast<std::size_t>(n);
    }
    return done;
  }

  void read_exact(std::span<std::byte> out, std::uint64_t offset) const {
    if (read_at(out, offset) != out.size()) fail(Errc::truncated, path_.string() + " ends before offset " + std::to_string(offset + out.size()));
  }

  void write_at(std::span<const std::byte> in, std::uint64_t offset) const {
    std::size_t done = 0;
    while (done < in.size()) {
      const ssize_t n = ::pwrite(fd_, in.data() + done, in.size() - done, static_cast<off_t>(offset + done));
      if (n < 0) {
        if (errno == EINTR) continue;
        fail(Errc::io, "pwrite " + path_.string() + ": " + std::strerror(errno));
      }
      done += static_cast<std::size_t>(n);
    }
  }

  void close() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  static File open_impl(const fs::path& p, int flags, IoMode mode, IoCounters* counters) {
    File f;
    f.path_ = p;
    if (mode == IoMode::direct) {
      f.fd_ = ::open(p.c_str(), flags | O_DIRECT | O_CLOEXEC, 0644);
      if (f.fd_ >= 0) {
        f.direct_ = true;
        return f;
      }
      if (errno != EINVAL) fail(Errc::io, "open " + p.string() + ": " + std::strerror(errno));
      if (counters != nullptr) bump(counters->direct_io_fallbacks, 1);
    }
    f.fd_ = ::open(p.c_str(), flags | O_CLOEXEC, 0644);
    if (f.fd_ < 0) fail(Errc::io, "open " + p.string() + ": " + std::strerror(errno));
    return f;
  }

  int fd_ = -1;
  bool direct_ = false;
  fs::path path_;
};

/// Reads [offset, offset+len) through one aligned positioned read; the
/// returned span points into `scratch` at the requested bytes. `accounted`
/// receives the number of bytes actually transferred.
inline std::span<const std::byte> read_aligned_range(const File& f, std::uint64_t offset, std::uint64_t len,
                                                     AlignedBuffer& scratch, std::uint64_t& accounted) {
  const std::uint64_t lo = align_down(offset);
  const std::uint64_t hi = align_up(offset + len);
  scratch.resize(hi - lo);
  const std::size_t got = f.read_at({scratch.data(), hi - lo}, lo);
  accounted = got;
  if (got < offset + len - lo) fail(Errc::truncated, f.path().string() + " shorter than expected section");
  return {scratch.data() + (offset - lo), len};
}

// Little-endian field packing for headers.
class HeaderWriter {
 public:
  template <class T>
  HeaderWriter& put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const std::byte*>(&v);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
    return *this;
  }
  HeaderWriter& magic(std::string_view m) {
    for (char c : m) bytes_.push_back(static_cast<std::byte>(c));
    return *this;
  }
  [[nodiscard]] const std::vector<std::byte>& bytes() const { return bytes_; }

 private:
  std::vector<std::byte> bytes_;
};

class HeaderReader {
 public:
  HeaderReader(std::span<const std::byte> b, std::string what) : bytes_(b), what_(std::move(what)) {}

  template <class T>
  T get() {
    if (pos_ + sizeof(T) > bytes_.size()) fail(Errc::truncated, what_ + ": header too short");
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void expect_magic(std::string_view m) {
    if (pos_ + m.size() > bytes_.size()) fail(Errc::truncated, what_ + ": header too short");
    if (std::memcmp(bytes_.data() + pos_, m.data(), m.size()) != 0)
      fail(Errc::bad_magic, what_ + ": expected magic " + std::string(m));
    pos_ += m.size();
  }

 private:
  std::span<const std::byte> bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline void write_text_file(const fs::path& p, const std::string& text) {
  File f = File::create(p, IoMode::buffered);
  f.write_at({reinterpret_cast<const std::byte*>(text.data()), text.size()}, 0);
}

inline std::string read_text_file(const fs::path& p) {
  File f = File::open_read(p, IoMode::buffered);
  std::string s(f.size(), '\0');
  f.read_exact({reinterpret_cast<std::byte*>(s.data()), s.size()}, 0);
  return s;
}

}  // namespace pushgnn
