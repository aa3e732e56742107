#pragma once

#include <cstdint>
#include <fstream>
#include <string>

#include "streamdiff/tensor.hpp"

namespace streamdiff {

// Latent stream container: "JAVL" magic, u32 version=1, u32 C, H, W,
// frames_per_block, then C*H*W little-endian f32 per emitted frame. The
// writer flushes at block boundaries so a reader can tail the file.
class JavlWriter {
public:
    JavlWriter(const std::string& path, int c, int h, int w, int frames_per_block);

    void write_frame(const Tensor& frame);  // [C x H x W]
    void end_block();                       // flush point
    void close();
    Index frames_written() const { return frames_; }
    const std::string& path() const { return path_; }

private:
    std::string path_;
    std::ofstream out_;
    int c_, h_, w_, fpb_;
    Index frames_ = 0;
    Index block_fill_ = 0;
};

struct JavlData {
    int c = 0, h = 0, w = 0, frames_per_block = 0;
    Tensor frames;  // [n x C x H x W]
};

JavlData read_javl(const std::string& path);

// Audio feature container: "JAAF" magic, u32 version=1, u32 dim, u32 frame
// count, then frame-major f32 vectors.
void write_jaaf(const std::string& path, const Tensor& features);  // [frames x dim]
Tensor read_jaaf(const std::string& path);

}  // namespace streamdiff
