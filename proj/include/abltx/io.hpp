#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>

namespace abltx {

// RAII POSIX file descriptor with positional I/O. Positional reads and
// writes do not touch a shared cursor, so one handle may be used from
// several threads as long as written regions are disjoint.
class File {
public:
    enum class Mode { Read, CreateTruncate };

    File() = default;
    File(const std::filesystem::path &path, Mode mode);
    ~File();

    File(File &&other) noexcept;
    File &operator=(File &&other) noexcept;
    File(const File &) = delete;
    File &operator=(const File &) = delete;

    std::uint64_t size() const;
    // Reads exactly buf.size() bytes; returns bytes read (< size only at EOF).
    std::size_t read_at(std::uint64_t offset, std::span<std::byte> buf) const;
    void read_exact(std::uint64_t offset, std::span<std::byte> buf) const;
    void write_at(std::uint64_t offset, std::span<const std::byte> buf) const;
    void truncate(std::uint64_t size) const;
    void sync() const;
    void close();

    const std::filesystem::path &path() const { return path_; }
    bool is_open() const { return fd_ >= 0; }

private:
    int fd_ = -1;
    std::filesystem::path path_;
};

// Output written to `<path>.partial` and renamed into place on commit(); an
// uncommitted file is removed on destruction.
class AtomicOutput {
public:
    explicit AtomicOutput(std::filesystem::path final_path);
    ~AtomicOutput();
    AtomicOutput(const AtomicOutput &) = delete;
    AtomicOutput &operator=(const AtomicOutput &) = delete;

    File &file() { return file_; }
    const std::filesystem::path &final_path() const { return final_; }
    void commit();

private:
    std::filesystem::path final_;
    std::filesystem::path partial_;
    File file_;
    bool committed_ = false;
};

} // namespace abltx
