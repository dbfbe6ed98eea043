#include <stdio.h>
#include <stdlib.h>

int clamp(int v, int lo, int hi);

int main(int argc, char **argv)
{
    int v = argc > 1 ? atoi(argv[1]) : 0;
    printf("%d\n", clamp(v, 0, 10));
    return 0;
}
