#pragma once

#include "tempokey/error.hpp"
#include "tempokey/tensor.hpp"
#include "tempokey/autograd.hpp"
#include "tempokey/ops.hpp"
#include "tempokey/adam.hpp"
#include "tempokey/binary_io.hpp"
#include "tempokey/dsp.hpp"
#include "tempokey/labels.hpp"
#include "tempokey/augment.hpp"
#include "tempokey/model.hpp"
#include "tempokey/data.hpp"
#include "tempokey/evaluate.hpp"
#include "tempokey/train.hpp"
